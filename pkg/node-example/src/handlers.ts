/**
 * Stage handlers: pure image operations with zero model dependencies.
 *
 * Each handler is the reference "oracle" behavior for its stage, useful for
 * wiring tests and as a template. To wrap a real pretrained model instead,
 * replace the body of the matching case in handleRequest: load the model
 * once at startup, run it on the decoded input, and write the result into
 * req.scratch_dir — the protocol plumbing stays identical.
 */

import * as path from "node:path";
import { ReplyMsg, RequestMsg, Role } from "./protocol";
import { Gray, Rgb, readGray, readRgb, writeGray, writeRgb } from "./png";

export type Behavior = "identity" | "oracle" | "constant";

/** The behavior each role implements. */
export const ROLE_BEHAVIOR: Record<Role, Behavior> = {
  segment: "identity",
  inpaint: "oracle",
  detect: "constant",
};

/** Mask = 255 where Rec.601 luma reaches mid-gray, else 0. */
export function binarizedLuma(image: Rgb): Gray {
  const out = new Uint8Array(image.width * image.height);
  for (let i = 0; i < out.length; i++) {
    const luma =
      0.299 * image.data[3 * i] +
      0.587 * image.data[3 * i + 1] +
      0.114 * image.data[3 * i + 2];
    out[i] = luma >= 128 ? 255 : 0;
  }
  return { width: image.width, height: image.height, data: out };
}

/** Copy clear-frame pixels into the hole; everything else is untouched. */
export function copyClearIntoHole(occluded: Rgb, hole: Gray, clear: Rgb): Rgb {
  if (
    occluded.width !== clear.width ||
    occluded.height !== clear.height ||
    occluded.width !== hole.width ||
    occluded.height !== hole.height
  ) {
    throw new Error(
      `shape mismatch: image ${occluded.width}x${occluded.height}, ` +
        `hole ${hole.width}x${hole.height}, clear ${clear.width}x${clear.height}`
    );
  }
  const data = Uint8Array.from(occluded.data);
  for (let i = 0; i < hole.data.length; i++) {
    if (hole.data[i] === 255) {
      data[3 * i] = clear.data[3 * i];
      data[3 * i + 1] = clear.data[3 * i + 1];
      data[3 * i + 2] = clear.data[3 * i + 2];
    }
  }
  return { width: occluded.width, height: occluded.height, data };
}

/** Boxes come straight from request params: [[x0,y0,x1,y1,class_id,conf], ...]. */
export function paramBoxes(params: Record<string, unknown>): number[][] {
  const raw = params.boxes ?? [];
  if (!Array.isArray(raw)) {
    throw new Error("params.boxes must be a list of boxes");
  }
  return raw.map((entry, i) => {
    if (
      !Array.isArray(entry) ||
      entry.length !== 6 ||
      !entry.every((v) => typeof v === "number" && Number.isFinite(v))
    ) {
      throw new Error(`box ${i} must be [x0,y0,x1,y1,class_id,conf]`);
    }
    return entry.map(Number);
  });
}

function inputPath(req: RequestMsg, name: string): string {
  const value = req.inputs[name];
  if (typeof value !== "string" || value.length === 0) {
    throw new Error(`request is missing input ${JSON.stringify(name)}`);
  }
  return value;
}

export function handleRequest(role: Role, req: RequestMsg): ReplyMsg {
  if (req.role !== role) {
    return {
      type: "error",
      id: req.id,
      message: `this node serves ${role}, request asked for ${req.role}`,
    };
  }
  switch (role) {
    case "segment": {
      const mask = binarizedLuma(readRgb(inputPath(req, "image")));
      const out = path.join(req.scratch_dir, `mask_${req.id}.png`);
      writeGray(mask, out);
      return { type: "response", id: req.id, outputs: { mask: out } };
    }
    case "inpaint": {
      const clearPath = req.params.clear_image;
      if (typeof clearPath !== "string") {
        throw new Error("inpaint oracle needs params.clear_image");
      }
      const result = copyClearIntoHole(
        readRgb(inputPath(req, "image")),
        readGray(inputPath(req, "mask")),
        readRgb(clearPath)
      );
      const out = path.join(req.scratch_dir, `inpainted_${req.id}.png`);
      writeRgb(result, out);
      return { type: "response", id: req.id, outputs: { image: out } };
    }
    case "detect":
      return { type: "response", id: req.id, boxes: paramBoxes(req.params) };
  }
}
