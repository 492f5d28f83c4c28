/** DOM wiring: one store per concern, one stream session, one redraw loop. */

import { BranchTree } from "./branches.js";
import { renderChart, type ChartSeries } from "./chart.js";
import { LogConsole } from "./console.js";
import { buildCommand, PANEL_TABS, RUN_CONTROLS, submitEnvelope, type PanelAction } from "./panels.js";
import { SeriesStore } from "./series.js";
import { StreamSession, type ConnectionState } from "./stream.js";

export class DashboardApp {
  readonly series = new SeriesStore();
  readonly tree = new BranchTree();
  readonly console = new LogConsole();
  private session: StreamSession | null = null;
  private selectedBranch = "b0";
  private dirty = false;

  constructor(private root: HTMLElement, private doc: Document) {}

  mount(): void {
    this.root.innerHTML = `
      <header>
        <strong>livetrain</strong>
        <input id="server-url" size="28" placeholder="http://127.0.0.1:7700">
        <button id="connect">Connect</button>
        <span id="banner" class="banner">disconnected</span>
      </header>
      <main>
        <section id="left">
          <canvas id="chart" width="860" height="380"></canvas>
          <div id="console" class="console"></div>
        </section>
        <aside id="right">
          <div id="run-controls"></div>
          <h3>Branches</h3>
          <div id="branches"></div>
          <div id="tabs"></div>
          <div id="forms"></div>
          <div id="form-error" class="error"></div>
        </aside>
      </main>`;
    const urlInput = this.el<HTMLInputElement>("#server-url");
    urlInput.value = localStorage.getItem("livetrain-url") ?? "http://127.0.0.1:7700";
    this.el("#connect").addEventListener("click", () => this.connect(urlInput.value));
    this.renderRunControls();
    this.renderTabs();
    const redraw = () => {
      if (this.dirty) {
        this.dirty = false;
        this.renderAll();
      }
      requestAnimationFrame(redraw);
    };
    requestAnimationFrame(redraw);
  }

  private el<T extends HTMLElement = HTMLElement>(selector: string): T {
    const found = this.root.querySelector(selector);
    if (!found) throw new Error(`missing element ${selector}`);
    return found as T;
  }

  get serverUrl(): string {
    return this.el<HTMLInputElement>("#server-url").value.replace(/\/+$/, "");
  }

  connect(url: string): void {
    localStorage.setItem("livetrain-url", url);
    this.session?.stop();
    this.session = new StreamSession(url, {
      onEvent: (event) => {
        this.series.addEvent(event);
        this.tree.addEvent(event);
        this.console.addEvent(event);
        this.dirty = true;
      },
      onReset: () => {
        this.series.clear();
        this.tree.clear();
        this.console.clear();
        this.dirty = true;
      },
      onState: (state, detail) => this.showBanner(state, detail),
    });
    this.session.start();
  }

  private showBanner(state: ConnectionState, detail?: string): void {
    const banner = this.el("#banner");
    banner.textContent = detail ? `${state}: ${detail}` : state;
    banner.className = `banner banner-${state}`;
  }

  private renderAll(): void {
    this.renderChartNow();
    this.renderBranches();
    this.renderConsole();
  }

  private renderChartNow(): void {
    const series = this.series.get(this.selectedBranch);
    const charted: ChartSeries[] = series
      ? [
          { label: "train loss", color: "#4cc2ff", points: series.trainLoss, axis: "left" },
          { label: "val loss", color: "#ffb454", points: series.valLoss, axis: "left" },
          { label: "grad norm", color: "#9d7cff", points: series.gradNorm, axis: "left" },
          { label: "lr (log)", color: "#49d17c", points: series.lr, axis: "right" },
        ]
      : [];
    renderChart(this.el<HTMLCanvasElement>("#chart"), charted);
  }

  private renderBranches(): void {
    const host = this.el("#branches");
    host.innerHTML = "";
    for (const { node, depth } of this.tree.rows()) {
      const row = this.doc.createElement("div");
      row.className = "branch-row" + (node.branch_id === this.selectedBranch ? " selected" : "");
      row.style.paddingLeft = `${depth * 14}px`;
      row.textContent =
        node.branch_id + (node.parent_branch_id ? ` (fork @ ${node.fork_step})` : " (root)");
      row.addEventListener("click", () => {
        this.selectedBranch = node.branch_id;
        this.dirty = true;
      });
      host.appendChild(row);
    }
  }

  private renderConsole(): void {
    const host = this.el("#console");
    const atBottom = host.scrollTop + host.clientHeight >= host.scrollHeight - 4;
    host.innerHTML = this.console.entries
      .map((e) => `<div class="c-${e.kind}${e.level ? " c-" + e.level : ""}">${escapeHtml(e.text)}</div>`)
      .join("");
    if (atBottom) host.scrollTop = host.scrollHeight;
  }

  private renderRunControls(): void {
    const host = this.el("#run-controls");
    for (const action of RUN_CONTROLS) {
      const button = this.doc.createElement("button");
      button.textContent = action.label;
      button.addEventListener("click", () => void this.fire(action, {}));
      host.appendChild(button);
    }
  }

  private renderTabs(): void {
    const tabsHost = this.el("#tabs");
    const formsHost = this.el("#forms");
    const showTab = (tabId: string) => {
      formsHost.querySelectorAll<HTMLElement>(".tab-form").forEach((form) => {
        form.style.display = form.dataset.tab === tabId ? "block" : "none";
      });
      tabsHost.querySelectorAll(".tab").forEach((tab) => {
        tab.className = "tab" + ((tab as HTMLElement).dataset.tab === tabId ? " active" : "");
      });
    };
    for (const tab of PANEL_TABS) {
      const button = this.doc.createElement("button");
      button.className = "tab";
      button.dataset.tab = tab.id;
      button.textContent = tab.label;
      button.addEventListener("click", () => showTab(tab.id));
      tabsHost.appendChild(button);

      const panel = this.doc.createElement("div");
      panel.className = "tab-form";
      panel.dataset.tab = tab.id;
      for (const action of tab.actions) {
        panel.appendChild(this.buildForm(action));
      }
      formsHost.appendChild(panel);
    }
    showTab(PANEL_TABS[0].id);
  }

  private buildForm(action: PanelAction): HTMLElement {
    const form = this.doc.createElement("form");
    form.dataset.action = action.id;
    const title = this.doc.createElement("h4");
    title.textContent = action.label;
    form.appendChild(title);
    for (const field of action.fields) {
      const label = this.doc.createElement("label");
      label.textContent = field.label;
      let input: HTMLInputElement | HTMLSelectElement;
      if (field.input === "select") {
        input = this.doc.createElement("select");
        for (const option of field.options ?? []) {
          const opt = this.doc.createElement("option");
          opt.value = option;
          opt.textContent = option;
          input.appendChild(opt);
        }
      } else {
        input = this.doc.createElement("input");
        input.placeholder = field.placeholder ?? "";
      }
      input.name = field.name;
      label.appendChild(input);
      form.appendChild(label);
    }
    const submit = this.doc.createElement("button");
    submit.textContent = "Send";
    form.appendChild(submit);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const values: Record<string, string> = {};
      for (const field of action.fields) {
        const input = form.elements.namedItem(field.name) as HTMLInputElement | HTMLSelectElement | null;
        values[field.name] = input?.value ?? "";
      }
      void this.fire(action, values);
    });
    return form;
  }

  async fire(action: PanelAction, values: Record<string, string>): Promise<void> {
    const errorHost = this.el("#form-error");
    const built = buildCommand(action, values);
    if ("error" in built) {
      errorHost.textContent = `blocked: ${built.error}`;
      return;
    }
    errorHost.textContent = "";
    try {
      await submitEnvelope(this.serverUrl, built.envelope);
    } catch (err) {
      errorHost.textContent = `rejected: ${String(err instanceof Error ? err.message : err)}`;
    }
  }
}

function escapeHtml(text: string): string {
  return text.replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c] as string);
}
