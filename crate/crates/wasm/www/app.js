// Vanilla-JS glue for the wasm demo. Expects the wasm-bindgen output in
// ./pkg (see the README build steps).

import init, { scp_playground, bounds_curve, soft_sort_demo } from "./pkg/ecp_wasm.js";

const $ = (id) => document.getElementById(id);

const SET_COLORS = ["#b9c4d8", "#3fa34d", "#f2b705", "#e8590c", "#b02a37"];
const BOUND_STYLES = [
  ["dpi", "#3459c4", "divergence bound"],
  ["mb_fano", "#0d7d5c", "model-based Fano"],
  ["simple_fano", "#c44f34", "simple Fano"],
  ["conftr", "#8a4fc4", "set-size (training) bound"],
  ["dpi_exact", "#666f82", "exact divergence form"],
];

function debounce(fn, ms = 60) {
  let t;
  return (...args) => {
    clearTimeout(t);
    t = setTimeout(() => fn(...args), ms);
  };
}

// --- panel 1: prediction-set playground ------------------------------------

function drawPlayground() {
  const alpha = Number($("pg-alpha").value);
  const spread = Number($("pg-spread").value);
  $("pg-alpha-out").value = alpha.toFixed(2);
  $("pg-spread-out").value = spread.toFixed(1);
  const out = JSON.parse(
    scp_playground(Number($("pg-seed").value) >>> 0, alpha, $("pg-score").value, 1200, spread)
  );
  const canvas = $("pg-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  const xs = out.points.map((p) => p.x);
  const ys = out.points.map((p) => p.y);
  const pad = 0.4;
  const [xmin, xmax] = [Math.min(...xs) - pad, Math.max(...xs) + pad];
  const [ymin, ymax] = [Math.min(...ys) - pad, Math.max(...ys) + pad];
  const sx = (x) => ((x - xmin) / (xmax - xmin)) * canvas.width;
  const sy = (y) => canvas.height - ((y - ymin) / (ymax - ymin)) * canvas.height;

  for (const p of out.points) {
    ctx.fillStyle = SET_COLORS[Math.min(p.set_size, SET_COLORS.length - 1)];
    ctx.beginPath();
    ctx.arc(sx(p.x), sy(p.y), 3.4, 0, Math.PI * 2);
    ctx.fill();
    if (!p.covered) {
      ctx.strokeStyle = "#1c2330";
      ctx.lineWidth = 1.1;
      ctx.beginPath();
      ctx.moveTo(sx(p.x) - 4, sy(p.y) - 4);
      ctx.lineTo(sx(p.x) + 4, sy(p.y) + 4);
      ctx.moveTo(sx(p.x) - 4, sy(p.y) + 4);
      ctx.lineTo(sx(p.x) + 4, sy(p.y) - 4);
      ctx.stroke();
    }
  }
  for (const [mx, my] of out.means) {
    ctx.strokeStyle = "#1c2330";
    ctx.lineWidth = 2;
    ctx.strokeRect(sx(mx) - 6, sy(my) - 6, 12, 12);
  }
  // Legend: set sizes.
  ctx.font = "12px system-ui";
  for (let s = 0; s <= 3; s++) {
    ctx.fillStyle = SET_COLORS[Math.min(s, SET_COLORS.length - 1)];
    ctx.beginPath();
    ctx.arc(16, 18 + 18 * s, 5, 0, Math.PI * 2);
    ctx.fill();
    ctx.fillStyle = "#1c2330";
    ctx.fillText(`set size ${s}${s === 3 ? "+" : ""}`, 28, 22 + 18 * s);
  }
  $("pg-stats").textContent =
    `coverage ${(out.coverage * 100).toFixed(1)}% (target ≥ ${((1 - out.alpha) * 100).toFixed(0)}%) · ` +
    `mean set size ${out.inefficiency.toFixed(2)} · threshold q̂ = ${Number.isFinite(out.q_hat) ? out.q_hat.toFixed(3) : "∞"} · ` +
    `n_cal ${out.n_cal}, crosses mark uncovered points`;
}

// --- panel 2: bound curves ---------------------------------------------------

function drawBounds() {
  const sharp = Number($("bc-sharp").value);
  const n = Number($("bc-n").value);
  $("bc-sharp-out").value = sharp.toFixed(2);
  $("bc-n-out").value = String(n);
  const out = JSON.parse(bounds_curve(Number($("bc-seed").value) >>> 0, sharp, n));
  const canvas = $("bc-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  const values = BOUND_STYLES.flatMap(([key]) => out[key]);
  const ymax = Math.max(...values, out.cross_entropy, out.exact_entropy) * 1.08;
  const ymin = Math.min(0, Math.min(...values));
  const [L, R, T, B] = [46, 12, 10, 30];
  const sx = (a) => L + ((a - out.alphas[0]) / (out.alphas.at(-1) - out.alphas[0])) * (canvas.width - L - R);
  const sy = (v) => T + (1 - (v - ymin) / (ymax - ymin)) * (canvas.height - T - B);

  ctx.strokeStyle = "#d8dee7";
  ctx.fillStyle = "#49536a";
  ctx.font = "11px system-ui";
  for (let v = 0; v <= ymax; v += 0.5) {
    ctx.beginPath();
    ctx.moveTo(L, sy(v));
    ctx.lineTo(canvas.width - R, sy(v));
    ctx.stroke();
    ctx.fillText(v.toFixed(1), 8, sy(v) + 4);
  }
  for (const a of [0.05, 0.15, 0.25, 0.35, 0.45]) {
    ctx.fillText(`α=${a.toFixed(2)}`, sx(a) - 16, canvas.height - 10);
  }

  const line = (ys, color, dash = []) => {
    ctx.strokeStyle = color;
    ctx.setLineDash(dash);
    ctx.lineWidth = 1.8;
    ctx.beginPath();
    ys.forEach((v, i) => (i === 0 ? ctx.moveTo(sx(out.alphas[i]), sy(v)) : ctx.lineTo(sx(out.alphas[i]), sy(v))));
    ctx.stroke();
    ctx.setLineDash([]);
  };
  line(out.alphas.map(() => out.exact_entropy), "#9aa3b5");
  line(out.alphas.map(() => out.cross_entropy), "#9aa3b5", [4, 4]);
  for (const [key, color] of BOUND_STYLES) {
    line(out[key], color, key === "dpi_exact" ? [2, 3] : []);
  }
  BOUND_STYLES.forEach(([, color, label], i) => {
    ctx.fillStyle = color;
    ctx.fillRect(L + 10, 16 + 16 * i, 18, 3);
    ctx.fillStyle = "#1c2330";
    ctx.fillText(label, L + 34, 22 + 16 * i);
  });
  ctx.fillStyle = "#49536a";
  ctx.fillText(`exact H(Y|X) = ${out.exact_entropy.toFixed(3)} nats (solid gray); cross-entropy dotted`, L + 10, 16 + 16 * BOUND_STYLES.length + 6);
  $("bc-stats").textContent =
    `mean set size ranges ${Math.min(...out.inefficiency).toFixed(2)} – ${Math.max(...out.inefficiency).toFixed(2)} over the α grid; ` +
    `every curve stays above the exact entropy, and the exact divergence form stays below the cross-entropy.`;
}

// --- panel 3: soft sorting ---------------------------------------------------

function drawSoftSort() {
  const steep = Math.pow(10, Number($("ss-steep").value));
  const m = Number($("ss-m").value);
  const alpha = Number($("ss-alpha").value);
  $("ss-steep-out").value = steep.toFixed(steep < 10 ? 2 : 0);
  $("ss-m-out").value = String(m);
  $("ss-alpha-out").value = alpha.toFixed(2);
  const out = JSON.parse(
    soft_sort_demo(Number($("ss-seed").value) >>> 0, steep, $("ss-swap").value, m, alpha)
  );
  const canvas = $("ss-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  const [L, R, T, B] = [10, 10, 16, 24];
  const w = (canvas.width - L - R) / m;
  const vmax = Math.max(...out.hard_sorted, ...out.soft_sorted) * 1.15;
  const sy = (v) => T + (1 - v / vmax) * (canvas.height - T - B);

  out.soft_sorted.forEach((v, i) => {
    ctx.fillStyle = "#7fa6e8";
    ctx.fillRect(L + i * w + 2, sy(v), w - 4, canvas.height - B - sy(v));
  });
  out.hard_sorted.forEach((v, i) => {
    ctx.strokeStyle = "#1c2330";
    ctx.lineWidth = 1.2;
    ctx.strokeRect(L + i * w + 2, sy(v), w - 4, canvas.height - B - sy(v));
  });
  if (Number.isFinite(out.soft_quantile)) {
    const x = L + (out.rank - 1) * w + w / 2;
    ctx.fillStyle = "#c44f34";
    ctx.beginPath();
    ctx.arc(x, sy(out.soft_quantile), 6, 0, Math.PI * 2);
    ctx.fill();
    ctx.strokeStyle = "#c44f34";
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(L, sy(out.hard_quantile));
    ctx.lineTo(canvas.width - R, sy(out.hard_quantile));
    ctx.stroke();
    ctx.setLineDash([]);
  }
  $("ss-stats").textContent =
    `filled bars: soft sort · outlines: exact sort · max |gap| ${out.max_abs_gap.toExponential(2)} · ` +
    `conformal rank ${out.rank} of ${m}: soft quantile ${out.soft_quantile.toFixed(4)} vs exact ${out.hard_quantile.toFixed(4)} (dashed line)`;
}

// --- wiring -------------------------------------------------------------------

async function main() {
  try {
    await init();
  } catch (e) {
    $("load-error").hidden = false;
    throw e;
  }
  const redrawAll = () => {
    drawPlayground();
    drawBounds();
    drawSoftSort();
  };
  for (const id of ["pg-alpha", "pg-spread", "pg-score", "pg-seed"]) {
    $(id).addEventListener("input", debounce(drawPlayground));
  }
  for (const id of ["bc-sharp", "bc-n", "bc-seed"]) {
    $(id).addEventListener("input", debounce(drawBounds, 120));
  }
  for (const id of ["ss-steep", "ss-swap", "ss-m", "ss-alpha", "ss-seed"]) {
    $(id).addEventListener("input", debounce(drawSoftSort));
  }
  redrawAll();
}

main();
