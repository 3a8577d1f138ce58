/**
 * Wire types for the "occlane-node/1" stage protocol: line-delimited UTF-8
 * JSON on stdin/stdout, one complete document per line, images exchanged by
 * file path. Log text belongs on stderr only.
 */

export const PROTOCOL = "occlane-node/1";

export type Role = "detect" | "inpaint" | "segment";

export const ROLES: readonly Role[] = ["detect", "inpaint", "segment"];

export interface HelloMsg {
  type: "hello";
  protocol: string;
  role: Role;
}

export interface RequestMsg {
  type: "request";
  id: number;
  role: Role;
  inputs: Record<string, string>;
  scratch_dir: string;
  params: Record<string, unknown>;
}

export interface ShutdownMsg {
  type: "shutdown";
}

export type ReplyMsg =
  | { type: "ready"; protocol: string; role: Role }
  | { type: "response"; id: number; outputs: Record<string, string> }
  | { type: "response"; id: number; boxes: number[][] }
  | { type: "error"; id: number | null; message: string };

export function writeLine(msg: ReplyMsg): void {
  process.stdout.write(JSON.stringify(msg) + "\n");
}

export function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

export function asRequest(msg: Record<string, unknown>): RequestMsg | null {
  if (
    msg.type !== "request" ||
    typeof msg.id !== "number" ||
    !Number.isInteger(msg.id) ||
    typeof msg.role !== "string" ||
    !isRecord(msg.inputs) ||
    typeof msg.scratch_dir !== "string"
  ) {
    return null;
  }
  for (const value of Object.values(msg.inputs)) {
    if (typeof value !== "string") return null;
  }
  return {
    type: "request",
    id: msg.id,
    role: msg.role as Role,
    inputs: msg.inputs as Record<string, string>,
    scratch_dir: msg.scratch_dir,
    params: isRecord(msg.params) ? msg.params : {},
  };
}
