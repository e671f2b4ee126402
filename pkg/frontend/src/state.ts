// Single reducer over the viewer state; every input and socket event flows
// through here so the UI stays consistent with what the server echoed back.

import { CameraState, OrbitState } from "./camera";
import { FrameMeta, Hello, PROTOCOL_VERSION, Pose, ViewRequest, steeringEquals } from "./protocol";

export interface ViewerState {
  connection: "connecting" | "open" | "closed";
  hello: Hello | null;
  camera: CameraState;
  fovDeg: number;
  time: number;
  sequence: string;
  showObjects: boolean;
  showBackground: boolean;
  depthView: boolean;
  width: number;
  height: number;
  lastFrame: FrameMeta | null;
  lastError: string | null;
  requestCounter: number;
}

export type Action =
  | { kind: "connecting" }
  | { kind: "opened" }
  | { kind: "closed" }
  | { kind: "hello"; hello: Hello }
  | { kind: "frame"; meta: FrameMeta }
  | { kind: "server_error"; message: string }
  | { kind: "camera"; camera: CameraState }
  | { kind: "set_time"; time: number }
  | { kind: "set_sequence"; sequence: string }
  | { kind: "toggle"; field: "showObjects" | "showBackground" | "depthView" };

export function initialState(): ViewerState {
  const orbit: OrbitState = {
    kind: "orbit", target: [0, 0, 0], distance: 10, azimuth: -Math.PI / 2, elevation: 0.3,
  };
  return {
    connection: "connecting",
    hello: null,
    camera: orbit,
    fovDeg: 50,
    time: 0,
    sequence: "",
    showObjects: true,
    showBackground: true,
    depthView: false,
    width: 320,
    height: 240,
    lastFrame: null,
    lastError: null,
    requestCounter: 0,
  };
}

export function reduce(state: ViewerState, action: Action): ViewerState {
  switch (action.kind) {
    case "connecting":
      return { ...state, connection: "connecting" };
    case "opened":
      return { ...state, connection: "open", lastError: null };
    case "closed":
      return { ...state, connection: "closed" };
    case "hello": {
      const h = action.hello;
      const orbit: OrbitState = {
        kind: "orbit",
        target: [...h.scene_center] as [number, number, number],
        distance: 2.2 * h.scene_scale,
        azimuth: -Math.PI / 2,
        elevation: 0.35,
      };
      return {
        ...state,
        hello: h,
        sequence: state.sequence || h.sequences[0],
        fovDeg: h.default_fov_deg ?? state.fovDeg,
        camera: orbit,
      };
    }
    case "frame":
      return { ...state, lastFrame: action.meta };
    case "server_error":
      return { ...state, lastError: action.message };
    case "camera":
      return { ...state, camera: action.camera };
    case "set_time":
      return { ...state, time: Math.min(1, Math.max(-1, action.time)) };
    case "set_sequence":
      return { ...state, sequence: action.sequence };
    case "toggle":
      return { ...state, [action.field]: !state[action.field] };
  }
}

export function buildRequest(state: ViewerState, pose: Pose, requestId: number): ViewRequest {
  return {
    type: "view_request",
    version: PROTOCOL_VERSION,
    request_id: requestId,
    pose,
    fov_deg: state.fovDeg,
    width: state.width,
    height: state.height,
    sequence: state.sequence,
    time: state.time,
    show_objects: state.showObjects,
    show_background: state.showBackground,
    depth_view: state.depthView,
    encoding: "png",
  };
}

// A displayed frame is stale when its echo no longer matches the live steering state.
export function frameIsStale(state: ViewerState, pose: Pose): boolean {
  if (!state.lastFrame) return false;
  const current = buildRequest(state, pose, 0);
  const echoed = { ...state.lastFrame.request, request_id: 0 };
  return !steeringEquals(current, echoed as ViewRequest);
}
