/** Canvas <-> image pixel mapping.
 *
 * The displayed element may be scaled arbitrarily (browser zoom, CSS
 * sizing); clicks map through the element's bounding rect into natural
 * image pixels, and dots render back through the inverse map. The pair
 * round-trips within one pixel for any display scale.
 */

export interface DisplayRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export interface PixelPos {
  row: number;
  col: number;
}

/** Client (viewport) coordinates -> image pixel indices, or null outside. */
export function clientToImage(
  clientX: number,
  clientY: number,
  rect: DisplayRect,
  naturalWidth: number,
  naturalHeight: number,
): PixelPos | null {
  if (rect.width <= 0 || rect.height <= 0) return null;
  const fx = (clientX - rect.left) / rect.width;
  const fy = (clientY - rect.top) / rect.height;
  if (fx < 0 || fx >= 1 || fy < 0 || fy >= 1) return null;
  const col = Math.min(naturalWidth - 1, Math.floor(fx * naturalWidth));
  const row = Math.min(naturalHeight - 1, Math.floor(fy * naturalHeight));
  return { row, col };
}

/** Image pixel center -> client coordinates. */
export function imageToClient(
  pos: PixelPos,
  rect: DisplayRect,
  naturalWidth: number,
  naturalHeight: number,
): { x: number; y: number } {
  return {
    x: rect.left + ((pos.col + 0.5) / naturalWidth) * rect.width,
    y: rect.top + ((pos.row + 0.5) / naturalHeight) * rect.height,
  };
}
