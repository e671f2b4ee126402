// Wire protocol with the render service: versioned JSON control messages plus
// binary frame payloads that always follow a frame_meta.

export const PROTOCOL_VERSION = 1;

export interface Pose {
  quat: [number, number, number, number]; // (w, x, y, z)
  pos: [number, number, number];
}

export interface ViewRequest {
  type: "view_request";
  version: number;
  request_id: number;
  pose: Pose;
  fov_deg: number;
  width: number;
  height: number;
  sequence: string;
  time: number;
  show_objects: boolean;
  show_background: boolean;
  depth_view: boolean;
  encoding: "png" | "raw";
}

export interface Hello {
  type: "hello";
  version: number;
  sequences: string[];
  time_range: [number, number];
  max_size: number;
  scene_center: [number, number, number];
  scene_scale: number;
  default_pose: Pose;
  default_fov_deg: number;
}

export interface FrameMeta {
  type: "frame_meta";
  version: number;
  width: number;
  height: number;
  encoding: "png" | "raw";
  render_ms: number;
  request: ViewRequest;
}

export interface ErrorMsg {
  type: "error";
  version: number;
  message: string;
  request: unknown;
}

export type ServerMessage = Hello | FrameMeta | ErrorMsg;

function isNumberArray(v: unknown, n: number): boolean {
  return Array.isArray(v) && v.length === n && v.every((x) => typeof x === "number");
}

function isPose(v: unknown): v is Pose {
  const p = v as Pose;
  return !!p && isNumberArray(p.quat, 4) && isNumberArray(p.pos, 3);
}

export function parseServerMessage(text: string): ServerMessage {
  let msg: any;
  try {
    msg = JSON.parse(text);
  } catch {
    throw new Error("unparseable server message");
  }
  switch (msg?.type) {
    case "hello":
      if (!Array.isArray(msg.sequences) || !msg.sequences.length
          || !isNumberArray(msg.time_range, 2) || !isPose(msg.default_pose)) {
        throw new Error("malformed hello");
      }
      return msg as Hello;
    case "frame_meta":
      if (typeof msg.width !== "number" || typeof msg.height !== "number"
          || typeof msg.render_ms !== "number" || !msg.request) {
        throw new Error("malformed frame_meta");
      }
      return msg as FrameMeta;
    case "error":
      if (typeof msg.message !== "string") throw new Error("malformed error message");
      return msg as ErrorMsg;
    default:
      throw new Error(`unknown message type: ${String(msg?.type)}`);
  }
}

// The fields of a request a frame must echo to count as current.
export function steeringEquals(a: ViewRequest, b: ViewRequest): boolean {
  return (
    a.sequence === b.sequence &&
    a.time === b.time &&
    a.fov_deg === b.fov_deg &&
    a.width === b.width &&
    a.height === b.height &&
    a.show_objects === b.show_objects &&
    a.show_background === b.show_background &&
    a.depth_view === b.depth_view &&
    a.pose.quat.every((v, i) => v === b.pose.quat[i]) &&
    a.pose.pos.every((v, i) => v === b.pose.pos[i])
  );
}
