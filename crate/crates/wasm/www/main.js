import init, { example, retrieve, run, fan_curve } from "./pkg/cac_wasm.js";

const $ = (id) => document.getElementById(id);

function cell(row, text, tag = "td") {
  const c = document.createElement(tag);
  c.textContent = text;
  row.appendChild(c);
  return c;
}

function table(el, headers, rows) {
  el.replaceChildren();
  const head = el.insertRow();
  headers.forEach((h) => cell(head, h, "th"));
  rows.forEach((r) => {
    const tr = el.insertRow();
    r.forEach((v) => cell(tr, v));
  });
}

function removed() {
  return JSON.stringify(
    [...document.querySelectorAll("#dms input:not(:checked)")].map((i) => i.value),
  );
}

function guarded(fn) {
  return () => {
    $("error").textContent = "";
    try {
      fn();
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
}

function showExample() {
  const ex = JSON.parse(example());
  const p = ex.problem;
  const opts = Object.entries(p.options).map(([k, v]) => `${k}) ${v}`).join("  ");
  $("problem").textContent = `${p.stem}  ${opts}  (correct: ${p.correct_letter})`;
  $("goal").value = ex.initial_goal;
  const el = $("dms");
  el.replaceChildren();
  const head = el.insertRow();
  ["use", "id", "description", "goal condition", "wm condition"].forEach((h) => cell(head, h, "th"));
  for (const d of ex.dms) {
    const tr = el.insertRow();
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = true;
    box.value = d.id;
    tr.insertCell().appendChild(box);
    [d.id, d.description, d.goal_condition, d.wm_condition].forEach((v) => cell(tr, v));
  }
}

function showRetrieval() {
  const k = Number($("k").value);
  const res = JSON.parse(retrieve($("goal").value, $("wm").value, k, removed()));
  table(
    $("hits"),
    ["rank", "id", "score", "goal sim", "wm sim", "description"],
    res.items.map((h) => [
      h.rank, h.id, h.score.toFixed(4), h.goal_similarity.toFixed(4), h.wm_similarity.toFixed(4), h.description,
    ]),
  );
}

function showRun() {
  const res = JSON.parse(run(removed()));
  const r = res.report;
  const div = r.divergence_index === null ? "none" : `step ${r.divergence_index}`;
  $("verdict").textContent =
    `base: ${r.base_outcome}, ablated: ${r.ablated_outcome}, verdict: ${r.verdict}, divergence: ${div}`;
  const fmt = (s) => (s ? `${s.tag} ${s.retrieved ? s.retrieved.id : "-"}: ${s.content}` : "");
  const n = Math.max(res.base.steps.length, res.ablated.steps.length);
  const rows = [];
  for (let i = 0; i < n; i++) rows.push([i, fmt(res.base.steps[i]), fmt(res.ablated.steps[i])]);
  table($("steps"), ["step", "full knowledge base", "ablated"], rows);
}

function showFan() {
  const rep = JSON.parse(fan_curve(Number($("max").value), Number($("step").value), $("zero").checked));
  $("crossover").textContent =
    rep.crossover === null ? "target stays at rank 1" : `target first loses rank 1 at ${rep.crossover} distractors`;
  const c = $("curve");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const xs = rep.rows.map((r) => r.distractors);
  const ys = rep.rows.map((r) => r.target_rank);
  const xmax = Math.max(1, ...xs);
  const ymax = Math.max(2, ...ys);
  const pad = 30;
  const sx = (x) => pad + (x / xmax) * (c.width - 2 * pad);
  const sy = (y) => c.height - pad - ((y - 1) / (ymax - 1)) * (c.height - 2 * pad);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  g.fillText(`rank ${ymax}`, 2, pad - 4);
  g.fillText("rank 1", 2, c.height - pad + 12);
  g.fillText(`${xmax} distractors`, c.width - pad - 70, c.height - 8);
  g.strokeStyle = "#0a58ca";
  g.beginPath();
  rep.rows.forEach((r, i) => (i ? g.lineTo : g.moveTo).call(g, sx(r.distractors), sy(r.target_rank)));
  g.stroke();
}

await init();
showExample();
$("retrieve").onclick = guarded(showRetrieval);
$("run").onclick = guarded(showRun);
$("fan").onclick = guarded(showFan);
guarded(showRetrieval)();
