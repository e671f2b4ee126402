import { describe, expect, it } from "vitest";

import {
  FlyState, OrbitState, Vec3, cross, flyMove, lookAtPose, norm, orbitPosition,
  orbitRotate, orbitZoom, poseOf, sub,
} from "../src/camera";

function quatRotate(q: [number, number, number, number], v: Vec3): Vec3 {
  const [w, x, y, z] = q;
  const u: Vec3 = [x, y, z];
  const uv = cross(u, v);
  const uuv = cross(u, uv);
  return [
    v[0] + 2 * (w * uv[0] + uuv[0]),
    v[1] + 2 * (w * uv[1] + uuv[1]),
    v[2] + 2 * (w * uv[2] + uuv[2]),
  ];
}

const orbit: OrbitState = {
  kind: "orbit", target: [1, 2, 0.5], distance: 8, azimuth: 0.3, elevation: 0.4,
};

describe("orbit camera", () => {
  it("keeps the target distance fixed while rotating", () => {
    let s = orbit;
    for (let i = 0; i < 20; i++) {
      s = orbitRotate(s, 0.17, 0.05);
      expect(norm(sub(orbitPosition(s), s.target))).toBeCloseTo(8, 10);
    }
  });

  it("zoom scales the distance within limits", () => {
    expect(orbitZoom(orbit, 1.5).distance).toBeCloseTo(12);
    let s = orbit;
    for (let i = 0; i < 200; i++) s = orbitZoom(s, 0.5);
    expect(s.distance).toBeGreaterThan(0);
  });

  it("clamps elevation away from the poles", () => {
    const s = orbitRotate(orbit, 0, 10);
    expect(s.elevation).toBeLessThan(Math.PI / 2);
  });

  it("always looks at the target", () => {
    const pose = poseOf(orbit);
    const fwdWorld = quatRotate(pose.quat, [0, 0, 1]); // camera +z in world
    const toTarget = sub(orbit.target, orbitPosition(orbit));
    const n = norm(toTarget);
    for (let i = 0; i < 3; i++) expect(fwdWorld[i]).toBeCloseTo(toTarget[i] / n, 8);
  });
});

describe("fly camera", () => {
  const fly: FlyState = { kind: "fly", position: [0, 0, 2], azimuth: Math.PI / 2, elevation: 0 };

  it("moves along the view direction", () => {
    const moved = flyMove(fly, { forward: true }, 2.0, 0.5);
    expect(moved.position[0]).toBeCloseTo(0, 8);
    expect(moved.position[1]).toBeCloseTo(1.0, 8);
    expect(moved.position[2]).toBeCloseTo(2, 8);
  });

  it("strafes perpendicular to the view", () => {
    const moved = flyMove(fly, { right: true }, 1.0, 1.0);
    expect(moved.position[0]).toBeCloseTo(1, 6);
    expect(moved.position[1]).toBeCloseTo(0, 6);
  });
});

describe("lookAtPose", () => {
  it("produces a unit quaternion with image-down y", () => {
    const pose = lookAtPose([0, -5, 1], [0, 0, 1]);
    const q = pose.quat;
    expect(Math.hypot(...q)).toBeCloseTo(1, 10);
    const down = quatRotate(q, [0, 1, 0]); // camera +y should point world-down
    expect(down[2]).toBeLessThan(0);
  });
});
