// Canvas <-> unit-square coordinate mapping. The server's y axis grows
// downward like the canvas, so only scaling is involved; clamping keeps
// drag events inside the valid control range.

export interface CanvasSize {
  width: number;
  height: number;
}

export const canvasToUnit = (
  px: number,
  py: number,
  size: CanvasSize,
): [number, number] => {
  const x = Math.min(1, Math.max(0, px / size.width));
  const y = Math.min(1, Math.max(0, py / size.height));
  return [x, y];
};

export const unitToCanvas = (
  x: number,
  y: number,
  size: CanvasSize,
): [number, number] => [x * size.width, y * size.height];
