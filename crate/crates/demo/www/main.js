import init, { platePreview, plateShift, abraHistogram, arcfaceCurve } from "./pkg/abra_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

const PLATES = 8, STRIP_W = 160, STRIP_H = 16;

function drawPlates() {
  const seed = num("p-seed"), tau = num("p-tau"), contrast = num("p-contrast");
  $("p-tau-v").textContent = tau.toFixed(2);
  $("p-contrast-v").textContent = contrast.toFixed(2);
  const ctx = $("p-canvas").getContext("2d");
  const lines = [];
  for (let p = 0; p < PLATES; p++) {
    const px = platePreview(seed, tau, contrast, p);
    ctx.putImageData(new ImageData(new Uint8ClampedArray(px), STRIP_W, STRIP_H), 0, p * STRIP_H);
    const s = plateShift(seed, tau, contrast, p);
    const fmt = (a) => Array.from(a, (v) => v.toFixed(2).padStart(6)).join(" ");
    const role = p >= PLATES - 2 ? "test " : "train";
    lines.push(`plate ${p} ${role}  gain ${fmt(s.slice(0, 3))}   offset ${fmt(s.slice(3))}`);
  }
  $("p-shifts").textContent = lines.join("\n");
}

function drawHistogram() {
  const seed = num("a-seed"), kmu = num("a-kmu"), ksigma = num("a-ksigma");
  $("a-kmu-v").textContent = kmu.toFixed(2);
  $("a-ksigma-v").textContent = ksigma.toFixed(2);
  const bins = 40;
  const h = abraHistogram(seed, kmu, ksigma, bins);
  const [lo, hi, dmu, dsigma] = h;
  const clean = h.slice(4, 4 + bins), pert = h.slice(4 + bins);
  const c = $("a-canvas"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const peak = Math.max(...clean, ...pert, 1);
  const bw = c.width / bins, base = c.height - 20;
  const bars = (counts, color, offset) => {
    ctx.fillStyle = color;
    counts.forEach((v, i) => {
      const hgt = (v / peak) * (base - 10);
      ctx.fillRect(i * bw + offset, base - hgt, bw / 2 - 1, hgt);
    });
  };
  bars(clean, "#888", 0);
  bars(pert, "#d33", bw / 2);
  ctx.fillStyle = "#222";
  ctx.fillText(lo.toFixed(2), 2, c.height - 5);
  ctx.fillText(hi.toFixed(2), c.width - 40, c.height - 5);
  $("a-info").textContent =
    `grey: clean channel, red: shifted. Drawn noise gives delta mu = ${dmu.toFixed(3)}, delta sigma = ${dsigma.toFixed(3)}.`;
}

function drawArcface() {
  const m = num("f-margin"), s = num("f-scale");
  $("f-margin-v").textContent = m.toFixed(2);
  $("f-scale-v").textContent = s.toFixed(0);
  const pts = arcfaceCurve(m, s, 181);
  const c = $("f-canvas"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const pad = 24;
  const x = (t) => pad + (t / Math.PI) * (c.width - 2 * pad);
  const y = (v) => c.height / 2 - (v / s) * (c.height / 2 - pad);
  ctx.strokeStyle = "#ccc";
  ctx.beginPath(); ctx.moveTo(pad, c.height / 2); ctx.lineTo(c.width - pad, c.height / 2); ctx.stroke();
  const line = (col, color) => {
    ctx.strokeStyle = color;
    ctx.beginPath();
    for (let i = 0; i < pts.length; i += 3) {
      const px = x(pts[i]), py = y(pts[i + col]);
      i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    }
    ctx.stroke();
  };
  line(1, "#888");
  line(2, "#d33");
  ctx.fillStyle = "#222";
  ctx.fillText("0", pad - 4, c.height - 6);
  ctx.fillText("π", c.width - pad - 4, c.height - 6);
  ctx.fillText(`+${s}`, 2, pad);
  ctx.fillText(`-${s}`, 2, c.height - pad);
}

function wire(ids, draw) {
  for (const id of ids) $(id).addEventListener("input", draw);
  draw();
}

await init();
wire(["p-seed", "p-tau", "p-contrast"], drawPlates);
wire(["a-seed", "a-kmu", "a-ksigma"], drawHistogram);
wire(["f-margin", "f-scale"], drawArcface);
