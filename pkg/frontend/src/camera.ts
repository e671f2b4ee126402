// Orbit and free-fly camera models producing (quat, pos) poses for the renderer.
// Camera convention: +z is the optical axis, +y points down the image, z-up world.

import { Pose } from "./protocol";

export type Vec3 = [number, number, number];

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return add(a, scale(b, -1));
}

export function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a) || 1;
  return scale(a, 1 / n);
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

// rotation matrix (column-major basis vectors) -> quaternion (w, x, y, z)
export function basisToQuat(x: Vec3, y: Vec3, z: Vec3): [number, number, number, number] {
  const m00 = x[0], m01 = y[0], m02 = z[0];
  const m10 = x[1], m11 = y[1], m12 = z[1];
  const m20 = x[2], m21 = y[2], m22 = z[2];
  const tr = m00 + m11 + m22;
  let w: number, qx: number, qy: number, qz: number;
  if (tr > 0) {
    const s = Math.sqrt(tr + 1) * 2;
    w = s / 4; qx = (m21 - m12) / s; qy = (m02 - m20) / s; qz = (m10 - m01) / s;
  } else if (m00 > m11 && m00 > m22) {
    const s = Math.sqrt(1 + m00 - m11 - m22) * 2;
    w = (m21 - m12) / s; qx = s / 4; qy = (m01 + m10) / s; qz = (m02 + m20) / s;
  } else if (m11 > m22) {
    const s = Math.sqrt(1 + m11 - m00 - m22) * 2;
    w = (m02 - m20) / s; qx = (m01 + m10) / s; qy = s / 4; qz = (m12 + m21) / s;
  } else {
    const s = Math.sqrt(1 + m22 - m00 - m11) * 2;
    w = (m10 - m01) / s; qx = (m02 + m20) / s; qy = (m12 + m21) / s; qz = s / 4;
  }
  const n = Math.hypot(w, qx, qy, qz);
  return [w / n, qx / n, qy / n, qz / n];
}

export function lookAtPose(position: Vec3, target: Vec3): Pose {
  const fwd = normalize(sub(target, position));
  const up: Vec3 = [0, 0, 1];
  let x = cross(fwd, up);
  if (norm(x) < 1e-6) x = [1, 0, 0]; // looking straight up/down
  x = normalize(x);
  const y = cross(fwd, x); // image-down
  return { quat: basisToQuat(x, y, fwd), pos: [...position] as Vec3 };
}

export interface OrbitState {
  kind: "orbit";
  target: Vec3;
  distance: number;
  azimuth: number; // radians around world z
  elevation: number; // radians above the horizon
}

export interface FlyState {
  kind: "fly";
  position: Vec3;
  azimuth: number;
  elevation: number;
}

export type CameraState = OrbitState | FlyState;

const EL_LIMIT = 1.45; // keep away from the poles

export function orbitPosition(s: OrbitState): Vec3 {
  const ce = Math.cos(s.elevation);
  return add(s.target, [
    s.distance * ce * Math.cos(s.azimuth),
    s.distance * ce * Math.sin(s.azimuth),
    s.distance * Math.sin(s.elevation),
  ]);
}

export function orbitRotate(s: OrbitState, dAz: number, dEl: number): OrbitState {
  return {
    ...s,
    azimuth: s.azimuth + dAz,
    elevation: Math.min(EL_LIMIT, Math.max(-EL_LIMIT, s.elevation + dEl)),
  };
}

export function orbitZoom(s: OrbitState, factor: number): OrbitState {
  return { ...s, distance: Math.min(1e5, Math.max(0.05, s.distance * factor)) };
}

function flyForward(s: FlyState): Vec3 {
  const ce = Math.cos(s.elevation);
  return [ce * Math.cos(s.azimuth), ce * Math.sin(s.azimuth), Math.sin(s.elevation)];
}

export function flyMove(
  s: FlyState, keys: { forward?: boolean; back?: boolean; left?: boolean; right?: boolean;
                       up?: boolean; down?: boolean }, speed: number, dt: number,
): FlyState {
  const fwd = flyForward(s);
  const right = normalize(cross(fwd, [0, 0, 1]));
  let d: Vec3 = [0, 0, 0];
  if (keys.forward) d = add(d, fwd);
  if (keys.back) d = sub(d, fwd);
  if (keys.right) d = add(d, right);
  if (keys.left) d = sub(d, right);
  if (keys.up) d = add(d, [0, 0, 1]);
  if (keys.down) d = sub(d, [0, 0, 1]);
  return { ...s, position: add(s.position, scale(d, speed * dt)) };
}

export function flyRotate(s: FlyState, dAz: number, dEl: number): FlyState {
  return {
    ...s,
    azimuth: s.azimuth + dAz,
    elevation: Math.min(EL_LIMIT, Math.max(-EL_LIMIT, s.elevation + dEl)),
  };
}

export function poseOf(s: CameraState): Pose {
  if (s.kind === "orbit") {
    return lookAtPose(orbitPosition(s), s.target);
  }
  const fwd = flyForward(s);
  return lookAtPose(s.position, add(s.position, fwd));
}
