// Pure frame -> screen geometry. Everything the canvas draws is computed
// here from a frame and a layout, so replaying a recorded frame log yields
// identical pixel coordinates.

import { X_LIMIT } from "./protocol.js";

export interface Layout {
  width: number;
  height: number;
  groundY: number;     // px, cart axle height
  pxPerMeter: number;
  cartW: number;       // px
  cartH: number;       // px
  poleLen: number;     // px
}

export function defaultLayout(width: number, height: number): Layout {
  // track spans the full canvas width with a small margin for the cart body
  const pxPerMeter = (width - 60) / (2 * X_LIMIT);
  return {
    width,
    height,
    groundY: Math.round(height * 0.72),
    pxPerMeter,
    cartW: 0.36 * pxPerMeter,
    cartH: 0.22 * pxPerMeter,
    poleLen: 1.0 * pxPerMeter, // full pole, 2 * half-length 0.5 m
  };
}

export function worldToScreenX(x: number, layout: Layout): number {
  return layout.width / 2 + x * layout.pxPerMeter;
}

export interface ScenePose {
  cartX: number;       // px center of the cart
  cartTop: number;     // px
  pivot: { x: number; y: number };
  poleTip: { x: number; y: number };
  targetX: number;     // px, marker at omega_x
  wallLeft: number;    // px
  wallRight: number;
}

// theta = 0 is upright; screen y grows downward
export function scenePose(x: number, theta: number, omegaX: number,
                          layout: Layout): ScenePose {
  const cartX = worldToScreenX(x, layout);
  const pivot = { x: cartX, y: layout.groundY - layout.cartH };
  return {
    cartX,
    cartTop: layout.groundY - layout.cartH,
    pivot,
    poleTip: {
      x: pivot.x + layout.poleLen * Math.sin(theta),
      y: pivot.y - layout.poleLen * Math.cos(theta),
    },
    targetX: worldToScreenX(omegaX, layout),
    wallLeft: worldToScreenX(-X_LIMIT, layout),
    wallRight: worldToScreenX(X_LIMIT, layout),
  };
}
