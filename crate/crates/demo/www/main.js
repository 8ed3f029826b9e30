import init, {
  select_points, selection_log_det, task_names, teacher_rollout, cold_start_share,
} from "./pkg/moe_distill_demo.js";

const $ = (id) => document.getElementById(id);
const points = [];

// world coordinates in [-1, 1]^2 mapped onto a square canvas
function toCanvas(c, x, y) {
  return [(x + 1) / 2 * c.width, (1 - (y + 1) / 2) * c.height];
}

function drawPoints() {
  const c = $("pts"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  let chosen = new Set();
  const m = Number($("m").value);
  if (points.length >= m && m > 0) {
    const xs = Float64Array.from(points, (p) => p[0]);
    const ys = Float64Array.from(points, (p) => p[1]);
    const strategy = $("strategy").value, seed = BigInt($("seed").value);
    try {
      chosen = new Set(select_points(xs, ys, m, strategy, seed));
      const ld = selection_log_det(xs, ys, m, strategy, seed);
      $("sel-info").textContent = `log det of chosen kernel minor: ${ld.toFixed(4)}`;
    } catch (e) {
      $("sel-info").textContent = String(e);
    }
  } else {
    $("sel-info").textContent = `add at least ${m} points`;
  }
  points.forEach((p, i) => {
    const [x, y] = toCanvas(c, p[0], p[1]);
    g.beginPath();
    g.arc(x, y, 5, 0, 2 * Math.PI);
    if (chosen.has(i)) { g.fillStyle = "#c33"; g.fill(); } else { g.strokeStyle = "#333"; g.stroke(); }
  });
}

function rollouts() {
  const c = $("traj"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const task = Number($("task").value), n = Number($("episodes").value);
  let wins = 0;
  for (let s = 0; s < n; s++) {
    const r = teacher_rollout(task, BigInt(s));
    const steps = (r.length - 3) / 2;
    g.strokeStyle = `hsl(${(s * 47) % 360} 60% 45%)`;
    g.beginPath();
    for (let t = 0; t < steps; t++) {
      const [x, y] = toCanvas(c, r[2 * t], r[2 * t + 1]);
      if (t === 0) g.moveTo(x, y); else g.lineTo(x, y);
    }
    g.stroke();
    const [gx, gy] = toCanvas(c, r[r.length - 3], r[r.length - 2]);
    g.fillStyle = g.strokeStyle;
    g.fillRect(gx - 3, gy - 3, 6, 6);
    wins += r[r.length - 1];
  }
  $("roll-info").textContent = `${wins} of ${n} episodes end within the success radius`;
}

function shareCurve() {
  const c = $("share"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const n = Number($("experts").value);
  const lo = -10, hi = 2;
  g.strokeStyle = "#999";
  g.strokeRect(0, 0, c.width, c.height);
  g.strokeStyle = "#36c";
  g.beginPath();
  for (let i = 0; i <= 120; i++) {
    const b = lo + (hi - lo) * i / 120;
    const x = i / 120 * c.width, y = (1 - cold_start_share(n, b)) * c.height;
    if (i === 0) g.moveTo(x, y); else g.lineTo(x, y);
  }
  g.stroke();
  const at = cold_start_share(n, -5);
  $("share-info").textContent =
    `bias from ${lo} to ${hi}; at bias -5 the new expert receives ${(100 * at).toFixed(3)}% of the gate mass`;
}

await init();
$("status").textContent = "";
task_names().forEach((name, i) => $("task").add(new Option(`${i}: ${name}`, i)));
$("pts").addEventListener("click", (e) => {
  const r = e.target.getBoundingClientRect();
  points.push([(e.clientX - r.left) / r.width * 2 - 1, 1 - (e.clientY - r.top) / r.height * 2]);
  drawPoints();
});
$("scatter").onclick = () => {
  for (let i = 0; i < 12; i++) points.push([Math.random() * 1.8 - 0.9, Math.random() * 1.8 - 0.9]);
  drawPoints();
};
$("clear").onclick = () => { points.length = 0; drawPoints(); };
["m", "strategy", "seed"].forEach((id) => $(id).addEventListener("change", drawPoints));
$("roll").onclick = rollouts;
$("experts").addEventListener("change", shareCurve);
drawPoints();
rollouts();
shareCurve();
