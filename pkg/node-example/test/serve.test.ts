import { ChildProcess, spawn } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import * as readline from "node:readline";
import { afterEach, describe, expect, it } from "vitest";

import { Rgb, readGray, writeRgb } from "../src/png";

const MAIN = path.join(__dirname, "..", "dist", "main.js");

/** Serial line client around one spawned node process. */
class Client {
  proc: ChildProcess;
  private lines: string[] = [];
  private waiters: Array<(line: string) => void> = [];

  constructor(args: string[]) {
    this.proc = spawn(process.execPath, [MAIN, ...args], {
      stdio: ["pipe", "pipe", "inherit"],
    });
    const rl = readline.createInterface({ input: this.proc.stdout! });
    rl.on("line", (line) => {
      const waiter = this.waiters.shift();
      if (waiter) waiter(line);
      else this.lines.push(line);
    });
  }

  send(msg: unknown): void {
    this.proc.stdin!.write(JSON.stringify(msg) + "\n");
  }

  sendRaw(text: string): void {
    this.proc.stdin!.write(text + "\n");
  }

  next(timeoutMs = 5000): Promise<any> {
    const got = this.lines.shift();
    if (got !== undefined) return Promise.resolve(JSON.parse(got));
    return new Promise((resolve, reject) => {
      const timer = setTimeout(
        () => reject(new Error("no line within timeout")),
        timeoutMs
      );
      this.waiters.push((line) => {
        clearTimeout(timer);
        resolve(JSON.parse(line));
      });
    });
  }

  exited(): Promise<number | null> {
    if (this.proc.exitCode !== null) return Promise.resolve(this.proc.exitCode);
    return new Promise((resolve) => this.proc.once("exit", resolve));
  }

  kill(): void {
    if (this.proc.exitCode === null) this.proc.kill("SIGKILL");
  }
}

async function ready(client: Client, role: string): Promise<void> {
  client.send({ type: "hello", protocol: "occlane-node/1", role });
  const reply = await client.next();
  expect(reply).toEqual({ type: "ready", protocol: "occlane-node/1", role });
}

let active: Client[] = [];
function start(args: string[]): Client {
  const client = new Client(args);
  active.push(client);
  return client;
}

afterEach(() => {
  for (const c of active) c.kill();
  active = [];
});

function tmpScratch(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "node-serve-"));
}

describe("handshake", () => {
  it("completes for a matching role", async () => {
    const client = start(["--role", "segment"]);
    await ready(client, "segment");
    client.send({ type: "shutdown" });
    expect(await client.exited()).toBe(0);
  });

  it("refuses a role it does not serve", async () => {
    const client = start(["--role", "segment"]);
    client.send({ type: "hello", protocol: "occlane-node/1", role: "inpaint" });
    const reply = await client.next();
    expect(reply.type).toBe("error");
    expect(reply.id).toBeNull();
    expect(reply.message).toMatch(/unsupported role/);
    expect(await client.exited()).toBe(1);
  });

  it("refuses an unknown protocol version", async () => {
    const client = start(["--role", "segment"]);
    client.send({ type: "hello", protocol: "occlane-node/2", role: "segment" });
    const reply = await client.next();
    expect(reply.type).toBe("error");
    expect(reply.message).toMatch(/unsupported protocol/);
    expect(await client.exited()).toBe(1);
  });

  it("rejects a bad --role before speaking", async () => {
    const client = start(["--role", "teleport"]);
    expect(await client.exited()).toBe(2);
  });
});

describe("request loop", () => {
  it("serves segment requests and survives malformed lines", async () => {
    const scratch = tmpScratch();
    const image: Rgb = {
      width: 4,
      height: 2,
      data: new Uint8Array(24), // all black
    };
    image.data.set([255, 255, 255], 0); // one bright pixel
    const imgPath = path.join(scratch, "in.png");
    writeRgb(image, imgPath);

    const client = start(["--role", "segment"]);
    await ready(client, "segment");

    client.send({
      type: "request",
      id: 1,
      role: "segment",
      inputs: { image: imgPath },
      scratch_dir: scratch,
      params: {},
    });
    const first = await client.next();
    expect(first.type).toBe("response");
    expect(first.id).toBe(1);
    const mask = readGray(first.outputs.mask);
    expect(mask.data[0]).toBe(255);
    expect([...mask.data.slice(1)].every((v) => v === 0)).toBe(true);

    client.sendRaw("%%% not a protocol line %%%");
    const err = await client.next();
    expect(err).toMatchObject({ type: "error", id: null });
    expect(err.message).toMatch(/malformed request line/);

    client.send({
      type: "request",
      id: 2,
      role: "segment",
      inputs: { image: imgPath },
      scratch_dir: scratch,
      params: {},
    });
    const second = await client.next();
    expect(second.id).toBe(2);

    client.send({ type: "shutdown" });
    expect(await client.exited()).toBe(0);
    fs.rmSync(scratch, { recursive: true, force: true });
  });

  it("echoes constant boxes for detect and errors on handler failures", async () => {
    const scratch = tmpScratch();
    const client = start(["--role", "detect"]);
    await ready(client, "detect");

    const boxes = [[4, 5, 20, 22, 1, 0.75]];
    client.send({
      type: "request",
      id: 1,
      role: "detect",
      inputs: {},
      scratch_dir: scratch,
      params: { boxes },
    });
    expect(await client.next()).toEqual({ type: "response", id: 1, boxes });

    client.send({
      type: "request",
      id: 2,
      role: "detect",
      inputs: {},
      scratch_dir: scratch,
      params: { boxes: [[1, 2]] },
    });
    const err = await client.next();
    expect(err).toMatchObject({ type: "error", id: 2 });

    // wrong-role request on a live session is answered, not fatal
    client.send({
      type: "request",
      id: 3,
      role: "segment",
      inputs: {},
      scratch_dir: scratch,
      params: {},
    });
    const mismatch = await client.next();
    expect(mismatch).toMatchObject({ type: "error", id: 3 });
    expect(mismatch.message).toMatch(/serves detect/);

    client.send({ type: "shutdown" });
    expect(await client.exited()).toBe(0);
    fs.rmSync(scratch, { recursive: true, force: true });
  });

  it("writes outputs only inside scratch_dir", async () => {
    const scratch = tmpScratch();
    const outside = tmpScratch();
    const image: Rgb = { width: 3, height: 3, data: new Uint8Array(27) };
    const imgPath = path.join(outside, "in.png");
    writeRgb(image, imgPath);

    const client = start(["--role", "segment"]);
    await ready(client, "segment");
    client.send({
      type: "request",
      id: 1,
      role: "segment",
      inputs: { image: imgPath },
      scratch_dir: scratch,
      params: {},
    });
    const reply = await client.next();
    expect(path.dirname(reply.outputs.mask)).toBe(scratch);
    expect(fs.readdirSync(outside)).toEqual(["in.png"]);

    client.send({ type: "shutdown" });
    await client.exited();
    fs.rmSync(scratch, { recursive: true, force: true });
    fs.rmSync(outside, { recursive: true, force: true });
  });

  it("stalls replies by --delay-ms", async () => {
    const scratch = tmpScratch();
    const client = start(["--role", "detect", "--delay-ms", "300"]);
    await ready(client, "detect");
    const t0 = Date.now();
    client.send({
      type: "request",
      id: 1,
      role: "detect",
      inputs: {},
      scratch_dir: scratch,
      params: {},
    });
    await client.next();
    expect(Date.now() - t0).toBeGreaterThanOrEqual(290);
    client.send({ type: "shutdown" });
    await client.exited();
    fs.rmSync(scratch, { recursive: true, force: true });
  });

  it("exits cleanly when stdin closes without shutdown", async () => {
    const client = start(["--role", "segment"]);
    await ready(client, "segment");
    client.proc.stdin!.end();
    expect(await client.exited()).toBe(0);
  });
});
