// Frame payloads travel as base64 row-major little-endian float64 plus
// shape metadata; decoding must be exact (no lossy image codec), which is
// what makes the studio's view of a frame bit-equal to the server's.

export interface FramePayload {
  b64: string;
  shape: number[];
}

const base64ToBytes = (b64: string): Uint8Array => {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  // node (tests)
  return new Uint8Array(Buffer.from(b64, "base64"));
};

export const decodeFrame = (payload: FramePayload): Float64Array => {
  const bytes = base64ToBytes(payload.b64);
  const count = payload.shape.reduce((a, b) => a * b, 1);
  if (bytes.byteLength !== count * 8) {
    throw new Error(
      `frame payload ${bytes.byteLength} bytes does not match shape ${payload.shape}`,
    );
  }
  const copy = bytes.slice(); // guarantee 8-byte alignment
  return new Float64Array(copy.buffer, 0, count);
};

// Grayscale mapping for display only: clamp to [0, 1] so model outputs
// outside the ground-truth range stay visible without rescaling tricks.
export const toGray = (values: Float64Array): Uint8ClampedArray => {
  const out = new Uint8ClampedArray(values.length);
  for (let i = 0; i < values.length; i++) {
    const v = Math.min(1, Math.max(0, values[i] ?? 0));
    out[i] = Math.round(v * 255);
  }
  return out;
};
