#!/usr/bin/env node
/**
 * Reference external node for the "occlane-node/1" stage protocol.
 *
 * Usage: node main.js --role <detect|inpaint|segment> [--behavior <name>]
 *                     [--delay-ms <n>]
 *
 * The node answers the hello handshake, then serves requests strictly
 * serially until a shutdown message or end of input. A hello asking for a
 * role this process does not serve is refused. Malformed request lines get
 * an error reply with id null and the loop continues. --delay-ms stalls
 * each reply and exists to exercise the parent's deadline handling.
 */

import * as readline from "node:readline";
import { parseArgs } from "node:util";
import { Behavior, ROLE_BEHAVIOR, handleRequest } from "./handlers";
import {
  PROTOCOL,
  ROLES,
  ReplyMsg,
  Role,
  asRequest,
  isRecord,
  writeLine,
} from "./protocol";

interface Options {
  role: Role;
  delayMs: number;
}

function parseOptions(argv: string[]): Options {
  const { values } = parseArgs({
    args: argv,
    options: {
      role: { type: "string" },
      behavior: { type: "string" },
      "delay-ms": { type: "string", default: "0" },
    },
  });
  const role = values.role as Role | undefined;
  if (!role || !ROLES.includes(role)) {
    throw new Error(`--role must be one of ${ROLES.join(", ")}`);
  }
  if (values.behavior && values.behavior !== ROLE_BEHAVIOR[role]) {
    throw new Error(
      `role ${role} implements behavior ${ROLE_BEHAVIOR[role]}, ` +
        `not ${values.behavior as Behavior}`
    );
  }
  const delayMs = Number(values["delay-ms"]);
  if (!Number.isFinite(delayMs) || delayMs < 0) {
    throw new Error("--delay-ms must be a non-negative number");
  }
  return { role, delayMs };
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

async function serve(opts: Options): Promise<number> {
  const rl = readline.createInterface({
    input: process.stdin,
    crlfDelay: Infinity,
  });
  try {
    return await serveLoop(rl, opts);
  } finally {
    rl.close();
    process.stdin.destroy(); // let the event loop drain even if stdin stays open
  }
}

async function serveLoop(
  rl: readline.Interface,
  opts: Options
): Promise<number> {
  const lines = rl[Symbol.asyncIterator]();

  const first = await lines.next();
  if (first.done) return 0;
  let hello: unknown;
  try {
    hello = JSON.parse(first.value);
  } catch {
    writeLine({ type: "error", id: null, message: "handshake line is not JSON" });
    return 1;
  }
  if (!isRecord(hello) || hello.type !== "hello") {
    writeLine({ type: "error", id: null, message: "expected a hello message" });
    return 1;
  }
  if (hello.protocol !== PROTOCOL) {
    writeLine({
      type: "error",
      id: null,
      message: `unsupported protocol ${JSON.stringify(hello.protocol)}, this node speaks ${PROTOCOL}`,
    });
    return 1;
  }
  if (hello.role !== opts.role) {
    writeLine({
      type: "error",
      id: null,
      message: `unsupported role ${JSON.stringify(hello.role)}, this node serves ${opts.role}`,
    });
    return 1;
  }
  writeLine({ type: "ready", protocol: PROTOCOL, role: opts.role });

  for await (const line of rl) {
    if (!line.trim()) continue;
    let msg: unknown;
    try {
      msg = JSON.parse(line);
    } catch {
      writeLine({
        type: "error",
        id: null,
        message: `malformed request line: ${line.slice(0, 120)}`,
      });
      continue;
    }
    if (!isRecord(msg)) {
      writeLine({ type: "error", id: null, message: "request must be an object" });
      continue;
    }
    if (msg.type === "shutdown") return 0;
    const req = asRequest(msg);
    if (req === null) {
      const id = typeof msg.id === "number" ? msg.id : null;
      writeLine({ type: "error", id, message: "not a well-formed request" });
      continue;
    }
    if (opts.delayMs > 0) await sleep(opts.delayMs);
    let reply: ReplyMsg;
    try {
      reply = handleRequest(opts.role, req);
    } catch (err) {
      reply = {
        type: "error",
        id: req.id,
        message: err instanceof Error ? err.message : String(err),
      };
    }
    writeLine(reply);
  }
  return 0;
}

async function main(): Promise<number> {
  let opts: Options;
  try {
    opts = parseOptions(process.argv.slice(2));
  } catch (err) {
    console.error(err instanceof Error ? err.message : String(err));
    return 2;
  }
  return serve(opts);
}

main().then((code) => {
  process.exitCode = code;
});
