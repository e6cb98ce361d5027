import init, { quad_sphere, terrain_denoise, compatibility_curve, kernel_curve } from "./pkg/surfcrf_demo.js";

const $ = (id) => document.getElementById(id);

function bindOutputs() {
  for (const input of document.querySelectorAll(".controls input[type=range]")) {
    const out = input.nextElementSibling;
    const show = () => { if (out) out.textContent = input.value; };
    input.addEventListener("input", show);
    show();
  }
}

// ---- cube sphere

const FACE_COLORS = ["#e4572e", "#29335c", "#f3a712", "#669bbc", "#a8c686", "#8e5572"];
let geometry = null;
let yaw = 0.6, pitch = 0.4;

function rotate([x, y, z]) {
  const cy = Math.cos(yaw), sy = Math.sin(yaw), cp = Math.cos(pitch), sp = Math.sin(pitch);
  const x1 = cy * x + sy * z, z1 = -sy * x + cy * z;
  return [x1, cp * y - sp * z1, sp * y + cp * z1];
}

function drawSphere() {
  const c = $("sphere"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (!geometry) return;
  const pos = geometry.positions, quads = geometry.quads, faces = geometry.faces;
  const r = c.width * 0.42, cx = c.width / 2, cy = c.height / 2;
  const pts = [];
  for (let i = 0; i < pos.length; i += 3) pts.push(rotate([pos[i], pos[i + 1], pos[i + 2]]));
  const order = [];
  for (let q = 0; q < quads.length / 4; q++) {
    let depth = 0;
    for (let k = 0; k < 4; k++) depth += pts[quads[4 * q + k]][2];
    if (depth > 0) order.push([depth, q]);
  }
  order.sort((a, b) => a[0] - b[0]);
  ctx.lineWidth = 0.6;
  for (const [depth, q] of order) {
    ctx.beginPath();
    for (let k = 0; k < 4; k++) {
      const p = pts[quads[4 * q + k]];
      const sx = cx + r * p[0], sy = cy - r * p[1];
      k === 0 ? ctx.moveTo(sx, sy) : ctx.lineTo(sx, sy);
    }
    ctx.closePath();
    ctx.globalAlpha = 0.35 + 0.6 * depth / 4;
    ctx.fillStyle = FACE_COLORS[faces[q]];
    ctx.fill();
    ctx.globalAlpha = 1;
    ctx.strokeStyle = "#fff";
    ctx.stroke();
  }
  ctx.fillStyle = "#d00";
  for (const v of geometry.corners) {
    const p = pts[v];
    if (p[2] <= 0) continue;
    ctx.beginPath();
    ctx.arc(cx + r * p[0], cy - r * p[1], 4, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function updateSphere() {
  const level = Number($("level").value);
  geometry = quad_sphere(level);
  const v = geometry.vertex_count, f = geometry.quad_count;
  $("sphere-stats").textContent = `V = ${v}, F = ${f}, E = ${2 * f}, V − E + F = ${v - 2 * f + f}`;
  drawSphere();
}

function enableDrag(canvas) {
  let last = null;
  canvas.addEventListener("pointerdown", (e) => { last = [e.clientX, e.clientY]; canvas.setPointerCapture(e.pointerId); });
  canvas.addEventListener("pointerup", () => { last = null; });
  canvas.addEventListener("pointermove", (e) => {
    if (!last) return;
    yaw += (e.clientX - last[0]) * 0.01;
    pitch = Math.max(-1.5, Math.min(1.5, pitch + (e.clientY - last[1]) * 0.01));
    last = [e.clientX, e.clientY];
    drawSphere();
  });
}

// ---- terrain

const GRID = 48, LABELS = 32;

function heat(t) {
  // dark blue → teal → yellow
  const a = [[20, 30, 90], [30, 150, 150], [250, 220, 60]];
  const s = Math.min(1, Math.max(0, t)) * 2, i = Math.min(1, Math.floor(s)), f = s - i;
  return a[i].map((c, k) => Math.round(c + (a[i + 1][k] - c) * f));
}

function drawLabels(id, labels) {
  const c = $(id), ctx = c.getContext("2d");
  const img = ctx.createImageData(GRID, GRID);
  for (let i = 0; i < labels.length; i++) {
    const [r, g, b] = heat(labels[i] / (LABELS - 1));
    img.data.set([r, g, b, 255], 4 * i);
  }
  const off = new OffscreenCanvas(GRID, GRID);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, c.width, c.height);
}

function updateTerrain() {
  const r = terrain_denoise(
    GRID, GRID, LABELS,
    Number($("noise").value), Number($("outliers").value),
    Number($("wp").value), Number($("thetac").value), Number($("iters").value),
    BigInt(Math.max(0, Number($("seed").value) | 0)),
  );
  drawLabels("t-truth", r.truth);
  drawLabels("t-base", r.baseline);
  drawLabels("t-crf", r.crf);
  $("t-base-cap").textContent = `argmax, mean |error| ${r.baseline_mae.toFixed(2)}`;
  $("t-crf-cap").textContent = `CRF, mean |error| ${r.crf_mae.toFixed(2)}`;
  r.free();
}

// ---- curves

function plot(id, ys, { color, xlabel, yrange }) {
  const c = $(id), ctx = c.getContext("2d");
  const m = { l: 44, r: 12, t: 12, b: 30 };
  const w = c.width - m.l - m.r, h = c.height - m.t - m.b;
  ctx.clearRect(0, 0, c.width, c.height);
  const [lo, hi] = yrange;
  const X = (i) => m.l + (w * i) / Math.max(1, ys.length - 1);
  const Y = (v) => m.t + h * (1 - (v - lo) / (hi - lo));
  ctx.strokeStyle = "#999";
  ctx.strokeRect(m.l, m.t, w, h);
  ctx.fillStyle = "#444";
  ctx.font = "11px system-ui";
  ctx.fillText(hi.toFixed(1), 4, m.t + 8);
  ctx.fillText(lo.toFixed(1), 4, m.t + h);
  ctx.fillText(xlabel, m.l + w / 2 - 30, c.height - 8);
  ctx.fillText("0", m.l - 3, m.t + h + 14);
  ctx.fillText(String(ys.length - 1), m.l + w - 8, m.t + h + 14);
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((v, i) => (i ? ctx.lineTo(X(i), Y(v)) : ctx.moveTo(X(i), Y(v))));
  ctx.stroke();
  ctx.fillStyle = color;
  ys.forEach((v, i) => { ctx.beginPath(); ctx.arc(X(i), Y(v), 2.5, 0, 2 * Math.PI); ctx.fill(); });
}

function updateCurves() {
  const mu = compatibility_curve(Number($("k-thetac").value), 32);
  plot("compat", Array.from(mu), { color: "#29335c", xlabel: "label distance", yrange: [-1, 0] });
  const w1 = Number($("k-w1").value);
  const k = kernel_curve(w1, Number($("k-t1").value), Number($("k-t2").value), Number($("k-t3").value), Number($("k-f").value), 12);
  plot("kernel", Array.from(k), { color: "#e4572e", xlabel: "grid distance", yrange: [0, 1 + w1] });
}

async function main() {
  await init();
  bindOutputs();
  enableDrag($("sphere"));
  $("level").addEventListener("input", updateSphere);
  for (const id of ["noise", "outliers", "wp", "thetac", "iters", "seed"]) $(id).addEventListener("input", updateTerrain);
  for (const id of ["k-thetac", "k-w1", "k-t1", "k-t2", "k-t3", "k-f"]) $(id).addEventListener("input", updateCurves);
  updateSphere();
  updateTerrain();
  updateCurves();
}

main().catch((e) => { $("error").textContent = String(e); });
