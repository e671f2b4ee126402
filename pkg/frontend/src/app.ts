// DOM wiring: canvas display, orbit/fly input, time scrubber, sequence selector,
// toggles, stale badge, and the render-time overlay.

import {
  CameraState, FlyState, OrbitState, flyMove, flyRotate, orbitRotate, orbitZoom, poseOf,
} from "./camera";
import { FrameMeta } from "./protocol";
import { RateLimiter } from "./rateLimiter";
import { ViewerSocket } from "./socket";
import { Action, ViewerState, buildRequest, frameIsStale, initialState, reduce } from "./state";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const staleEl = document.getElementById("stale")!;
const overlayEl = document.getElementById("overlay")!;
const timeEl = document.getElementById("time") as HTMLInputElement;
const seqEl = document.getElementById("sequence") as HTMLSelectElement;
const modeEl = document.getElementById("mode") as HTMLSelectElement;
const objectsEl = document.getElementById("objects") as HTMLInputElement;
const backgroundEl = document.getElementById("background") as HTMLInputElement;
const depthEl = document.getElementById("depth") as HTMLInputElement;

let state: ViewerState = initialState();
const keys: Record<string, boolean> = {};

function dispatch(action: Action): void {
  state = reduce(state, action);
  syncUi();
  requestFrame();
}

const url = `ws://${location.host}/ws`;
const socket = new ViewerSocket(url, {
  onOpen: () => dispatch({ kind: "opened" }),
  onClose: (retry) => {
    statusEl.textContent = retry ? "disconnected - retrying" : "closed";
    dispatch({ kind: "closed" });
  },
  onMessage: (msg) => {
    if (msg.type === "hello") {
      dispatch({ kind: "hello", hello: msg });
      populateSequences(msg.sequences);
    } else if (msg.type === "error") {
      dispatch({ kind: "server_error", message: msg.message });
    }
  },
  onFramePayload: (meta, payload) => drawFrame(meta, payload),
});

const limiter = new RateLimiter<import("./protocol").ViewRequest>((req) => {
  socket.send(req);
}, 33);

function requestFrame(): void {
  if (state.connection !== "open" || !state.hello) return;
  state = { ...state, requestCounter: state.requestCounter + 1 };
  limiter.submit(buildRequest(state, poseOf(state.camera), state.requestCounter));
}

async function drawFrame(meta: FrameMeta, payload: Blob | ArrayBuffer): Promise<void> {
  dispatch({ kind: "frame", meta });
  canvas.width = meta.width;
  canvas.height = meta.height;
  if (meta.encoding === "png") {
    const blob = payload instanceof Blob ? payload : new Blob([payload]);
    const bitmap = await createImageBitmap(blob);
    ctx.drawImage(bitmap, 0, 0);
  } else {
    const buf = payload instanceof Blob ? await payload.arrayBuffer() : payload;
    const rgb = new Uint8ClampedArray(buf);
    const rgba = new Uint8ClampedArray(meta.width * meta.height * 4);
    for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
      rgba[j] = rgb[i]; rgba[j + 1] = rgb[i + 1]; rgba[j + 2] = rgb[i + 2]; rgba[j + 3] = 255;
    }
    ctx.putImageData(new ImageData(rgba, meta.width, meta.height), 0, 0);
  }
  overlayEl.textContent = `render ${meta.render_ms.toFixed(1)} ms  `
    + `t=${meta.request.time.toFixed(2)}  seq=${meta.request.sequence}`;
  syncUi();
}

function populateSequences(sequences: string[]): void {
  seqEl.innerHTML = "";
  for (const s of sequences) {
    const opt = document.createElement("option");
    opt.value = s;
    opt.textContent = s;
    seqEl.appendChild(opt);
  }
  seqEl.value = state.sequence;
}

function syncUi(): void {
  statusEl.textContent = state.connection;
  const stale = state.lastFrame !== null && frameIsStale(state, poseOf(state.camera));
  staleEl.style.display = stale ? "inline" : "none";
  if (state.lastError) statusEl.textContent = `${state.connection} - ${state.lastError}`;
}

// input: drag to orbit / look, wheel to zoom, WASD+QE to fly
let dragging = false;
let lastXY: [number, number] = [0, 0];
canvas.addEventListener("mousedown", (e) => {
  dragging = true;
  lastXY = [e.clientX, e.clientY];
});
window.addEventListener("mouseup", () => (dragging = false));
window.addEventListener("mousemove", (e) => {
  if (!dragging) return;
  const dx = (e.clientX - lastXY[0]) * 0.008;
  const dy = (e.clientY - lastXY[1]) * 0.008;
  lastXY = [e.clientX, e.clientY];
  const cam = state.camera;
  dispatch({
    kind: "camera",
    camera: cam.kind === "orbit" ? orbitRotate(cam, -dx, dy) : flyRotate(cam, -dx, -dy),
  });
});
canvas.addEventListener("wheel", (e) => {
  e.preventDefault();
  const cam = state.camera;
  if (cam.kind === "orbit") {
    dispatch({ kind: "camera", camera: orbitZoom(cam, e.deltaY > 0 ? 1.12 : 0.9) });
  }
});
window.addEventListener("keydown", (e) => (keys[e.key.toLowerCase()] = true));
window.addEventListener("keyup", (e) => (keys[e.key.toLowerCase()] = false));

setInterval(() => {
  const cam = state.camera;
  if (cam.kind !== "fly") return;
  const moved = flyMove(cam, {
    forward: keys["w"], back: keys["s"], left: keys["a"], right: keys["d"],
    up: keys["e"], down: keys["q"],
  }, (state.hello?.scene_scale ?? 5) * 0.6, 0.05);
  if (moved.position.some((v, i) => v !== cam.position[i])) {
    dispatch({ kind: "camera", camera: moved });
  }
}, 50);

timeEl.addEventListener("input", () => dispatch({ kind: "set_time", time: Number(timeEl.value) }));
seqEl.addEventListener("change", () => dispatch({ kind: "set_sequence", sequence: seqEl.value }));
objectsEl.addEventListener("change", () => dispatch({ kind: "toggle", field: "showObjects" }));
backgroundEl.addEventListener("change", () => dispatch({ kind: "toggle", field: "showBackground" }));
depthEl.addEventListener("change", () => dispatch({ kind: "toggle", field: "depthView" }));
modeEl.addEventListener("change", () => {
  const cam = state.camera;
  if (modeEl.value === "fly" && cam.kind === "orbit") {
    const pos = poseOf(cam).pos;
    const fly: FlyState = {
      kind: "fly", position: pos, azimuth: cam.azimuth + Math.PI, elevation: -cam.elevation,
    };
    dispatch({ kind: "camera", camera: fly });
  } else if (modeEl.value === "orbit" && cam.kind === "fly") {
    const orbit: OrbitState = {
      kind: "orbit",
      target: (state.hello ? [...state.hello.scene_center] : [0, 0, 0]) as [number, number, number],
      distance: 2 * (state.hello?.scene_scale ?? 5),
      azimuth: cam.azimuth + Math.PI,
      elevation: 0.3,
    };
    dispatch({ kind: "camera", camera: orbit });
  }
});

statusEl.textContent = "connecting";
