/** Control panels: form definitions that map 1:1 onto the command args
 * schemas, and the form -> envelope construction with client-side blocking. */

import {
  buildEnvelope,
  validateArgs,
  type CommandEnvelope,
  type CommandKind,
} from "./protocol.js";

export interface FieldSpec {
  name: string;
  label: string;
  input: "number" | "text" | "select";
  options?: string[];
  placeholder?: string;
}

export interface PanelAction {
  id: string;
  label: string;
  command: CommandKind;
  fields: FieldSpec[];
  /** Raw form values (strings, empty = untouched) -> args object. */
  buildArgs(values: Record<string, string>): Record<string, unknown>;
}

export interface PanelTab {
  id: string;
  label: string;
  actions: PanelAction[];
}

function num(raw: string): number {
  const v = Number(raw);
  if (raw.trim() === "" || !Number.isFinite(v)) throw new FormError(`not a number: ${raw}`);
  return v;
}

export class FormError extends Error {}

const wrap = (v: number | null) => ({ value: v });

export const PANEL_TABS: PanelTab[] = [
  {
    id: "optimizer",
    label: "Optimizer",
    actions: [
      {
        id: "update_optimizer",
        label: "Update optimizer",
        command: "update_optimizer",
        fields: [
          { name: "lr", label: "learning rate", input: "number", placeholder: "1e-5" },
          { name: "momentum", label: "momentum", input: "number", placeholder: "0.9" },
          { name: "weight_decay", label: "weight decay", input: "number", placeholder: "0.0" },
          { name: "grad_clip", label: "grad clip (\"off\" to disable)", input: "text", placeholder: "1.0" },
        ],
        buildArgs(values) {
          const args: Record<string, unknown> = {};
          if (values.lr?.trim()) args.lr = wrap(num(values.lr));
          if (values.momentum?.trim()) args.momentum = wrap(num(values.momentum));
          if (values.weight_decay?.trim()) args.weight_decay = wrap(num(values.weight_decay));
          const clip = values.grad_clip?.trim();
          if (clip) args.grad_clip = clip.toLowerCase() === "off" ? wrap(null) : wrap(num(clip));
          return args;
        },
      },
    ],
  },
  {
    id: "model",
    label: "Model",
    actions: [
      {
        id: "model_layer_operation",
        label: "Layer operation",
        command: "model_layer_operation",
        fields: [
          { name: "layer", label: "layer", input: "text", placeholder: "h1" },
          { name: "op", label: "operation", input: "select", options: ["reset", "reinitialize"] },
        ],
        buildArgs: (values) => ({ layer: values.layer ?? "", op: values.op ?? "reset" }),
      },
      {
        id: "model_layer_parameter_update",
        label: "Layer parameter",
        command: "model_layer_parameter_update",
        fields: [
          { name: "layer", label: "layer", input: "text", placeholder: "h1" },
          { name: "param", label: "parameter", input: "select", options: ["dropout_rate"] },
          { name: "value", label: "value", input: "number", placeholder: "0.1" },
        ],
        buildArgs: (values) => ({
          layer: values.layer ?? "",
          param: values.param ?? "dropout_rate",
          value: num(values.value ?? ""),
        }),
      },
    ],
  },
  {
    id: "checkpoint",
    label: "Checkpoint",
    actions: [
      {
        id: "save_checkpoint",
        label: "Save checkpoint",
        command: "save_checkpoint",
        fields: [],
        buildArgs: () => ({}),
      },
      {
        id: "load_checkpoint",
        label: "Load checkpoint (forks a branch)",
        command: "load_checkpoint",
        fields: [{ name: "uuid", label: "checkpoint uuid", input: "text", placeholder: "ck0001-b0-s100" }],
        buildArgs: (values) => ({ uuid: values.uuid ?? "" }),
      },
    ],
  },
  {
    id: "dataset",
    label: "Dataset",
    actions: [
      {
        id: "update_dataset",
        label: "Replace/add source",
        command: "update_dataset",
        fields: [
          { name: "source", label: "source name", input: "text", placeholder: "deployed" },
          { name: "data_path", label: "data path (server-side)", input: "text", placeholder: "/data/new.json" },
        ],
        buildArgs: (values) => ({ source: values.source ?? "", data_path: values.data_path ?? "" }),
      },
      {
        id: "update_dataset_runtime_hyperparameters",
        label: "Mixture weights",
        command: "update_dataset_runtime_hyperparameters",
        fields: [
          {
            name: "weights",
            label: "weights (JSON object)",
            input: "text",
            placeholder: '{"synthetic": 1, "deployed": 3}',
          },
        ],
        buildArgs(values) {
          let parsed: unknown;
          try {
            parsed = JSON.parse(values.weights ?? "");
          } catch {
            throw new FormError("weights must be a JSON object");
          }
          return { weights: parsed };
        },
      },
    ],
  },
];

export const RUN_CONTROLS: PanelAction[] = (
  [
    ["pause_training", "Pause"],
    ["resume_training", "Resume"],
    ["stop_training", "Stop"],
    ["do_evaluate", "Evaluate"],
  ] as [CommandKind, string][]
).map(([command, label]) => ({
  id: command,
  label,
  command,
  fields: [],
  buildArgs: () => ({}),
}));

export type BuildResult = { envelope: CommandEnvelope } | { error: string };

/** Form values -> validated envelope, or the schema reason to block. */
export function buildCommand(action: PanelAction, values: Record<string, string>): BuildResult {
  let args: Record<string, unknown>;
  try {
    args = action.buildArgs(values);
  } catch (err) {
    return { error: err instanceof FormError ? err.message : String(err) };
  }
  const reason = validateArgs(action.command, args);
  if (reason) return { error: reason };
  return { envelope: buildEnvelope(action.command, args) };
}

/** POST an envelope to the server; resolves to {uuid, status} or throws. */
export async function submitEnvelope(baseUrl: string, envelope: CommandEnvelope): Promise<{ uuid: string; status: string }> {
  const resp = await fetch(baseUrl.replace(/\/+$/, "") + "/command", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(envelope),
  });
  const body = (await resp.json()) as Record<string, unknown>;
  if (!resp.ok) {
    const field = body.field ? ` (${String(body.field)})` : "";
    throw new Error(`${String(body.error ?? resp.status)}${field}`);
  }
  return { uuid: String(body.uuid), status: String(body.status) };
}
