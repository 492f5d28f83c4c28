/** Branch tree built from branch_created events (or the /branches response). */

import type { TrainingEvent } from "./protocol.js";

export interface BranchNode {
  branch_id: string;
  parent_branch_id: string | null;
  fork_step: number;
}

export interface BranchRow {
  node: BranchNode;
  depth: number;
}

export class BranchTree {
  private nodes = new Map<string, BranchNode>();

  upsert(node: BranchNode): void {
    this.nodes.set(node.branch_id, node);
  }

  addEvent(event: TrainingEvent): void {
    if (event.event_type !== "branch_created") return;
    const p = event.payload;
    if (typeof p.branch_id !== "string") return;
    this.upsert({
      branch_id: p.branch_id,
      parent_branch_id: typeof p.parent_branch_id === "string" ? p.parent_branch_id : null,
      fork_step: typeof p.fork_step === "number" ? p.fork_step : 0,
    });
  }

  loadServerList(list: BranchNode[]): void {
    this.nodes.clear();
    for (const node of list) this.upsert(node);
  }

  get(branchId: string): BranchNode | undefined {
    return this.nodes.get(branchId);
  }

  size(): number {
    return this.nodes.size;
  }

  /** Depth-first rows for rendering, children in creation (id) order. */
  rows(): BranchRow[] {
    const children = new Map<string | null, BranchNode[]>();
    for (const node of this.nodes.values()) {
      const key = node.parent_branch_id ?? null;
      const list = children.get(key) ?? [];
      list.push(node);
      children.set(key, list);
    }
    for (const list of children.values()) {
      list.sort((a, b) => a.branch_id.localeCompare(b.branch_id, undefined, { numeric: true }));
    }
    const out: BranchRow[] = [];
    const visit = (parent: string | null, depth: number) => {
      for (const node of children.get(parent) ?? []) {
        out.push({ node, depth });
        visit(node.branch_id, depth + 1);
      }
    };
    visit(null, 0);
    return out;
  }

  /** True iff this tree holds exactly the same nodes as a /branches reply. */
  matchesServer(list: BranchNode[]): boolean {
    if (list.length !== this.nodes.size) return false;
    return list.every((server) => {
      const mine = this.nodes.get(server.branch_id);
      return (
        !!mine &&
        mine.parent_branch_id === (server.parent_branch_id ?? null) &&
        mine.fork_step === server.fork_step
      );
    });
  }

  clear(): void {
    this.nodes.clear();
  }
}
