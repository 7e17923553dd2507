import init, { fieldSlice, radiusScan, radiusFit } from "./pkg/gibly_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);
const RES = 160;
const EXTENT = 1.0;

function drawField() {
  const values = fieldSlice(
    $("kind").value, num("r"), num("t"), num("beta"), num("w"),
    num("phix"), num("phiy"), num("phiz"), $("normalized").checked, EXTENT, RES,
  );
  const scale = Math.max(1e-12, ...values.map(Math.abs));
  const ctx = $("field").getContext("2d");
  const img = ctx.createImageData(RES, RES);
  values.forEach((v, i) => {
    const a = Math.min(1, Math.abs(v) / scale);
    const o = 4 * i;
    img.data[o] = v > 0 ? 255 : 255 * (1 - a);
    img.data[o + 1] = 255 * (1 - a);
    img.data[o + 2] = v < 0 ? 255 : 255 * (1 - a);
    img.data[o + 3] = 255;
  });
  ctx.putImageData(img, 0, 0);
}

function runFit() {
  const [trueR, noise, t, r0] = [num("true-r"), num("noise"), num("shell"), num("r0")];
  const steps = parseInt($("steps").value, 10);
  const rMin = 0.02, rMax = Math.max(1.0, 2 * trueR), samples = 120;
  const scan = radiusScan(trueR, noise, t, rMin, rMax, samples);
  const fit = radiusFit(trueR, noise, t, r0, steps, num("lr"));
  const fitted = fit[0];
  const trajectory = fit.slice(1);

  const canvas = $("scan");
  const ctx = canvas.getContext("2d");
  const pad = 30, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const lo = Math.min(...scan, ...trajectory), hi = Math.max(...scan, ...trajectory);
  const x = (r) => pad + ((r - rMin) / (rMax - rMin)) * w;
  const y = (v) => pad + h - ((v - lo) / (hi - lo || 1)) * h;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, w, h);
  ctx.strokeStyle = "#06c";
  ctx.beginPath();
  scan.forEach((v, k) => {
    const r = rMin + (k * (rMax - rMin)) / (samples - 1);
    k ? ctx.lineTo(x(r), y(v)) : ctx.moveTo(x(r), y(v));
  });
  ctx.stroke();
  ctx.fillStyle = "#c30";
  ctx.beginPath();
  ctx.arc(x(fitted), y(trajectory[trajectory.length - 1]), 4, 0, 2 * Math.PI);
  ctx.fill();
  ctx.fillStyle = "#000";
  ctx.fillText(`r = ${rMin}`, pad, canvas.height - 8);
  ctx.fillText(`r = ${rMax}`, pad + w - 40, canvas.height - 8);
  $("fit-result").textContent =
    `fitted r = ${fitted.toFixed(4)} (true ${trueR}); objective ${trajectory[0].toFixed(5)} → ${trajectory[trajectory.length - 1].toFixed(5)}`;
}

function guard(f) {
  return () => {
    try {
      f();
      $("status").textContent = "";
    } catch (e) {
      $("status").textContent = String(e);
    }
  };
}

await init();
for (const id of ["kind", "r", "t", "beta", "w", "phix", "phiy", "phiz", "normalized"]) {
  $(id).addEventListener("input", guard(drawField));
}
$("run").addEventListener("click", guard(runFit));
guard(drawField)();
