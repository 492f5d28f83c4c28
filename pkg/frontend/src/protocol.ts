/** Wire types and client-side validation mirroring the server's schemas. */

export const COMMAND_KINDS = [
  "update_optimizer",
  "save_checkpoint",
  "load_checkpoint",
  "pause_training",
  "resume_training",
  "stop_training",
  "model_layer_operation",
  "model_layer_parameter_update",
  "update_dataset",
  "update_dataset_runtime_hyperparameters",
  "do_evaluate",
] as const;

export type CommandKind = (typeof COMMAND_KINDS)[number];

export interface CommandEnvelope {
  command: string;
  args: string; // JSON string whose content is a JSON object (double-encoded)
  time: number;
  uuid: string;
  status: string;
}

export const EVENT_TYPES = [
  "metric",
  "log",
  "command_status",
  "checkpoint_saved",
  "branch_created",
  "evaluation_result",
  "training_ended",
] as const;

export type EventType = (typeof EVENT_TYPES)[number];

export interface TrainingEvent {
  event_type: EventType;
  step: number;
  branch_id: string;
  time: number;
  payload: Record<string, unknown>;
}

function randomUuid(): string {
  const c = globalThis.crypto as Crypto | undefined;
  if (c?.randomUUID) return c.randomUUID();
  return `u-${Date.now().toString(16)}-${Math.floor(Math.random() * 1e12).toString(16)}`;
}

export function buildEnvelope(command: CommandKind, args: Record<string, unknown>): CommandEnvelope {
  return {
    command,
    args: JSON.stringify(args),
    time: Date.now() / 1000,
    uuid: randomUuid(),
    status: "requested",
  };
}

export function parseEvent(raw: string): TrainingEvent {
  const obj = JSON.parse(raw) as Record<string, unknown>;
  const type = obj.event_type as string;
  if (!(EVENT_TYPES as readonly string[]).includes(type)) {
    throw new Error(`unknown event_type ${JSON.stringify(type)}`);
  }
  if (typeof obj.step !== "number" || obj.step < 0) throw new Error("bad step");
  if (typeof obj.branch_id !== "string") throw new Error("bad branch_id");
  if (typeof obj.time !== "number") throw new Error("bad time");
  if (typeof obj.payload !== "object" || obj.payload === null) throw new Error("bad payload");
  return {
    event_type: type as EventType,
    step: obj.step,
    branch_id: obj.branch_id,
    time: obj.time,
    payload: obj.payload as Record<string, unknown>,
  };
}

// ---------------------------------------------------------------------------
// args validation (same rules the server enforces, for client-side blocking)
// ---------------------------------------------------------------------------

const isNum = (v: unknown): v is number => typeof v === "number" && Number.isFinite(v);

function wrapped(args: Record<string, unknown>, key: string): { value: unknown } | null {
  const entry = args[key];
  if (typeof entry !== "object" || entry === null || !("value" in entry)) return null;
  return entry as { value: unknown };
}

/** Returns a human-readable reason the args are invalid, or null if valid. */
export function validateArgs(kind: CommandKind, args: Record<string, unknown>): string | null {
  switch (kind) {
    case "update_optimizer": {
      const keys = Object.keys(args);
      if (keys.length === 0) return "provide at least one hyperparameter";
      for (const key of keys) {
        if (!["lr", "momentum", "weight_decay", "grad_clip"].includes(key)) {
          return `unknown hyperparameter ${key}`;
        }
        const entry = wrapped(args, key);
        if (!entry) return `${key} must be {"value": ...}`;
        const v = entry.value;
        if (key === "grad_clip" && v === null) continue;
        if (!isNum(v)) return `${key} must be a number`;
        if (key === "lr" && v <= 0) return "lr must be > 0";
        if (key === "momentum" && (v < 0 || v >= 1)) return "momentum must be in [0, 1)";
        if (key === "weight_decay" && v < 0) return "weight_decay must be >= 0";
        if (key === "grad_clip" && v <= 0) return "grad_clip must be > 0 or null";
      }
      return null;
    }
    case "load_checkpoint":
      return typeof args.uuid === "string" && args.uuid.length > 0
        ? null
        : "uuid must be a non-empty string";
    case "model_layer_operation": {
      if (typeof args.layer !== "string" || !args.layer) return "layer is required";
      if (args.op !== "reset" && args.op !== "reinitialize") {
        return 'op must be "reset" or "reinitialize"';
      }
      return null;
    }
    case "model_layer_parameter_update": {
      if (typeof args.layer !== "string" || !args.layer) return "layer is required";
      if (typeof args.param !== "string" || !args.param) return "param is required";
      if (!isNum(args.value)) return "value must be a number";
      return null;
    }
    case "update_dataset": {
      if (typeof args.source !== "string" || !args.source) return "source is required";
      if (typeof args.data_path !== "string" || !args.data_path) return "data_path is required";
      return null;
    }
    case "update_dataset_runtime_hyperparameters": {
      const weights = args.weights;
      if (typeof weights !== "object" || weights === null || Array.isArray(weights)) {
        return "weights must be an object";
      }
      const entries = Object.entries(weights as Record<string, unknown>);
      if (entries.length === 0) return "weights must not be empty";
      for (const [name, v] of entries) {
        if (!isNum(v) || v < 0) return `weight for ${name} must be a number >= 0`;
      }
      return null;
    }
    default: {
      // empty-args commands
      return Object.keys(args).length === 0 ? null : "this command takes no arguments";
    }
  }
}
