// Static demo page logic. The wasm module is produced by wasm-bindgen
// into ./pkg (see the README for the two build commands).

import init, { DemoSession } from "./pkg/pointcorr_wasm.js";

let session = null;
let matches = null; // Uint32Array of target indices, or null before matching
let losses = [];
let angle = 0;

const $ = (id) => document.getElementById(id);
const status = (msg) => { $("status").textContent = msg; };

function readConfig() {
  return {
    shape: $("shape").value,
    n: parseInt($("npoints").value, 10),
    amplitude: parseFloat($("amplitude").value),
    noise: parseFloat($("noise").value),
    seed: parseInt($("seed").value, 10) >>> 0,
  };
}

for (const id of ["npoints", "amplitude", "noise"]) {
  $(id).addEventListener("input", () => {
    const v = parseFloat($(id).value);
    $(`${id}-val`).textContent = id === "npoints" ? v : v.toFixed(2);
  });
}

// ---------------------------------------------------------------------------
// rendering

function bbox(points) {
  const lo = [Infinity, Infinity, Infinity];
  const hi = [-Infinity, -Infinity, -Infinity];
  for (let i = 0; i < points.length; i += 3) {
    for (let a = 0; a < 3; a++) {
      lo[a] = Math.min(lo[a], points[i + a]);
      hi[a] = Math.max(hi[a], points[i + a]);
    }
  }
  return [lo, hi];
}

function positionColor(p, lo, hi) {
  const c = [0, 0, 0];
  for (let a = 0; a < 3; a++) {
    const range = hi[a] - lo[a];
    c[a] = Math.round(255 * (range > 0 ? (p[a] - lo[a]) / range : 0.5));
  }
  return c;
}

function drawCloud(ctx, points, colors, cx, cy, scale, theta) {
  const cos = Math.cos(theta), sin = Math.sin(theta);
  const order = [];
  for (let i = 0; i < points.length / 3; i++) {
    const x = points[3 * i], y = points[3 * i + 1], z = points[3 * i + 2];
    const rx = cos * x + sin * z;
    const rz = -sin * x + cos * z;
    order.push([rz, cx + scale * rx, cy - scale * y, i]);
  }
  order.sort((a, b) => a[0] - b[0]); // painter's order, far first
  for (const [rz, px, py, i] of order) {
    const [r, g, b] = colors(i);
    const depth = 0.65 + 0.35 * Math.max(0, Math.min(1, (rz + 1.2) / 2.4));
    ctx.fillStyle = `rgb(${Math.round(r * depth)},${Math.round(g * depth)},${Math.round(b * depth)})`;
    ctx.beginPath();
    ctx.arc(px, py, 3.0, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function render() {
  const canvas = $("view");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!session) {
    ctx.fillStyle = "#999";
    ctx.font = "15px system-ui";
    ctx.fillText("generate a pair to begin", 24, 40);
    return;
  }
  const src = session.source_points();
  const tgt = session.target_points();
  const [lo, hi] = bbox(tgt);
  const targetColor = (i) =>
    positionColor([tgt[3 * i], tgt[3 * i + 1], tgt[3 * i + 2]], lo, hi);
  const sourceColor = matches
    ? (i) => targetColor(matches[i])
    : () => [150, 150, 150];

  drawCloud(ctx, src, sourceColor, canvas.width * 0.27, canvas.height * 0.5, 150, angle);
  drawCloud(ctx, tgt, targetColor, canvas.width * 0.73, canvas.height * 0.5, 150, angle);
  ctx.fillStyle = "#555";
  ctx.font = "13px system-ui";
  ctx.fillText(matches ? "source (colors transferred through matches)" : "source (unmatched)", 60, 18);
  ctx.fillText("target (colored by position)", canvas.width * 0.63, 18);
}

function drawLossChart() {
  const canvas = $("loss-chart");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (losses.length < 2) return;
  const logs = losses.map((l) => Math.log10(l.total));
  const min = Math.min(...logs), max = Math.max(...logs);
  const sx = canvas.width / (losses.length - 1);
  const sy = canvas.height / Math.max(1e-9, max - min);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  logs.forEach((v, i) => {
    const x = i * sx, y = canvas.height - (v - min) * sy;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.font = "11px system-ui";
  ctx.fillText(`loss ${losses[losses.length - 1].total.toFixed(4)} @ step ${losses.length}`, 8, 12);
}

function drawAccChart(curve, err) {
  const canvas = $("acc-chart");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const sx = canvas.width / 0.2;
  const sy = canvas.height - 16;
  ctx.strokeStyle = "#ddd";
  for (const frac of [0.25, 0.5, 0.75, 1.0]) {
    const y = canvas.height - frac * sy;
    ctx.beginPath(); ctx.moveTo(0, y); ctx.lineTo(canvas.width, y); ctx.stroke();
  }
  ctx.strokeStyle = "#36c";
  ctx.lineWidth = 2;
  ctx.beginPath();
  curve.forEach(([eps, acc], i) => {
    const x = eps * sx, y = canvas.height - acc * sy;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.lineWidth = 1;
  ctx.fillStyle = "#555";
  ctx.font = "11px system-ui";
  const acc5 = curve.find(([e]) => Math.abs(e - 0.05) < 1e-9);
  ctx.fillText(`err ${err.toFixed(4)}  acc(0.05) ${(acc5 ? acc5[1] : 0).toFixed(3)}`, 8, 12);
}

// ---------------------------------------------------------------------------
// actions

function generate() {
  const cfg = readConfig();
  try {
    session = new DemoSession(cfg.shape, cfg.n, cfg.amplitude, 2.0, cfg.noise, cfg.seed);
  } catch (e) {
    status(`generation failed: ${e}`);
    return;
  }
  matches = null;
  losses = [];
  drawLossChart();
  $("acc-chart").getContext("2d").clearRect(0, 0, 460, 180);
  $("train-info").textContent = "untrained";
  $("match-info").textContent = "colors transfer once matched";
  status(`generated ${cfg.n}-point ${cfg.shape} pair (seed ${cfg.seed})`);
}

async function train() {
  if (!session) { status("generate a pair first"); return; }
  const button = $("train");
  button.disabled = true;
  status("training...");
  const chunk = 5;
  for (let done = 0; done < 25; done += chunk) {
    // yield to the event loop so the page stays responsive
    await new Promise((r) => setTimeout(r, 0));
    let rows;
    try {
      rows = JSON.parse(session.train_steps(chunk));
    } catch (e) {
      status(`training failed: ${e}`);
      button.disabled = false;
      return;
    }
    losses.push(...rows);
    $("train-info").textContent =
      `step ${session.step_count()}, loss ${rows[rows.length - 1].total.toFixed(4)}`;
    drawLossChart();
  }
  status("trained 25 steps");
  button.disabled = false;
}

function resetModel() {
  if (!session) return;
  session.reset_model(readConfig().seed);
  matches = null;
  losses = [];
  drawLossChart();
  $("train-info").textContent = "untrained";
  status("model re-initialized");
}

function matchAndEvaluate() {
  if (!session) { status("generate a pair first"); return; }
  try {
    matches = session.match_points();
    const summary = JSON.parse(session.evaluate());
    drawAccChart(summary.curve, summary.err);
    $("match-info").textContent =
      `err ${summary.err.toFixed(4)} (target diameter ${summary.d.toFixed(2)})`;
    status("matched; source now wears the target's colors");
  } catch (e) {
    status(`matching failed: ${e}`);
  }
}

$("generate").addEventListener("click", generate);
$("train").addEventListener("click", train);
$("reset").addEventListener("click", resetModel);
$("match").addEventListener("click", matchAndEvaluate);

function loop() {
  angle += 0.004;
  render();
  requestAnimationFrame(loop);
}

await init();
status("ready - generate a pair");
loop();
