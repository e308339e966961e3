import init, { Scene } from "./pkg/lrp_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view-canvas");
const ctx = canvas.getContext("2d");
const status = $("status");

let scene = null;
let focus = null;

function say(text, error = false) {
  status.textContent = text;
  status.className = error ? "error" : "";
}

function rebuild() {
  try {
    scene?.free();
    scene = new Scene(+$("dim").value, +$("depth").value, +$("occ").value, +$("seed").value);
    $("layer").max = scene.depth - 1;
    $("layer").value = Math.min(+$("layer").value, scene.depth - 1);
    focus = Array.from(scene.default_focus(+$("layer").value));
    draw();
  } catch (e) {
    say(e.message, true);
  }
}

function heat(v) {
  const t = Math.max(0, Math.min(1, v));
  return `rgb(${Math.round(255 * t)}, ${Math.round(80 + 120 * t)}, ${Math.round(200 - 180 * t)})`;
}

function draw() {
  if (!scene) return;
  const dim = scene.dim, depth = scene.depth, z = +$("layer").value;
  const ladder = $("ladder").value, view = $("view").value;
  const [fx, fy, fz] = focus;
  const cell = canvas.width / dim;
  const at = (x, y) => (x * dim + y) * depth + z;
  let occupied, value;
  const reach = scene.reachable(ladder, fx, fy, fz);
  occupied = (i) => reach[i] > 0;
  let summary = "";
  if (view === "reach") {
    const colors = ["#fff", "#ccc", "#2a7", "#d22"];
    value = (i) => colors[reach[i]];
    summary = `${reach.filter((v) => v >= 2).length} of ${scene.voxels} voxels reachable`;
  } else if (view === "cascade") {
    const top = Math.max(...ladder.split(",").map(Number));
    $("stage").max = Math.round(Math.log(top) / Math.log(3)) + 1;
    const g = scene.cascade(ladder, +$("stage").value);
    let lo = Infinity, hi = -Infinity;
    reach.forEach((r, i) => { if (r > 0) { lo = Math.min(lo, g[i]); hi = Math.max(hi, g[i]); } });
    value = (i) => heat((g[i] - lo) / (hi - lo || 1));
    summary = `stage ${$("stage").value}, channel 0`;
  } else {
    const g = scene.erf(view === "erf-lrp", ladder, fx, fy, fz);
    value = (i) => (g[i] > 0 ? heat(Math.sqrt(g[i])) : "#ddd");
    summary = `${g.filter((v) => v > 0).length} voxels with nonzero gradient`;
  }
  ctx.fillStyle = "#fff";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  for (let x = 0; x < dim; x++) {
    for (let y = 0; y < dim; y++) {
      const i = at(x, y);
      if (!occupied(i)) continue;
      ctx.fillStyle = value(i);
      ctx.fillRect(x * cell, y * cell, cell, cell);
    }
  }
  if (fz === z) {
    ctx.strokeStyle = "#000";
    ctx.lineWidth = 2;
    ctx.strokeRect(fx * cell + 1, fy * cell + 1, cell - 2, cell - 2);
  }
  say(`focus (${fx}, ${fy}, ${fz}); ${summary}`);
}

canvas.addEventListener("click", (ev) => {
  if (!scene) return;
  const r = canvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - r.left) / r.width) * scene.dim);
  const y = Math.floor(((ev.clientY - r.top) / r.height) * scene.dim);
  const z = +$("layer").value;
  const reach = scene.reachable($("ladder").value, ...focus);
  if (reach[(x * scene.dim + y) * scene.depth + z] === 0) {
    say(`(${x}, ${y}, ${z}) is empty`, true);
    return;
  }
  focus = [x, y, z];
  draw();
});

for (const id of ["dim", "depth", "occ", "seed"]) $(id).addEventListener("change", rebuild);
for (const id of ["ladder", "view", "stage", "layer"]) $(id).addEventListener("input", () => {
  try { draw(); } catch (e) { say(e.message, true); }
});

await init();
rebuild();
