import { describe, expect, it } from "vitest";
import {
  base64ToBytes,
  bytesToBase64,
  decodeIndices,
  decodePositions,
  encodeIndices,
  encodePositions,
} from "../src/protocol.js";
import { sha256Hex } from "../src/sha256.js";

describe("base64 codec", () => {
  it("matches the platform encoder for every length mod 3", () => {
    for (let n = 0; n < 32; n++) {
      const bytes = new Uint8Array(n);
      for (let i = 0; i < n; i++) bytes[i] = (i * 37 + 11) % 256;
      const expected = Buffer.from(bytes).toString("base64");
      expect(bytesToBase64(bytes)).toBe(expected);
      expect([...base64ToBytes(expected)]).toEqual([...bytes]);
    }
  });

  it("round-trips typed arrays as little-endian payloads", () => {
    const pos = new Float32Array([0.5, -1.25, 3e7, 0, -0]);
    const idx = new Uint32Array([0, 1, 2, 4294967295]);
    expect([...decodePositions(encodePositions(pos))]).toEqual([...pos]);
    expect([...decodeIndices(encodeIndices(idx))]).toEqual([...idx]);
    // byte-level check against node's own view of the buffers
    expect(encodePositions(pos)).toBe(
      Buffer.from(pos.buffer).toString("base64"));
  });
});

describe("sha256", () => {
  it("matches known test vectors", () => {
    expect(sha256Hex("")).toBe(
      "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    expect(sha256Hex("abc")).toBe(
      "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    expect(sha256Hex("a".repeat(1000))).toBe(
      "41edece42d63e8d9bf515a9ba6932e1c20cbc9f5a5d134645adb5db1b9737ea3");
  });

  it("agrees with node crypto on arbitrary text", async () => {
    const { createHash } = await import("node:crypto");
    for (const text of ["chunk=0,0,0;structure=22;positions=AAA=;indices=",
                        "x".repeat(63), "x".repeat(64), "x".repeat(65),
                        "multi\nline\npayload"]) {
      const ref = createHash("sha256").update(text, "utf-8").digest("hex");
      expect(sha256Hex(text)).toBe(ref);
    }
  });
});
