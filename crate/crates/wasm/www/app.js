import init, { explore_seqlogical, align_pair, match_preview, pool_size } from "./pkg/csparse_wasm.js";

const $ = (id) => document.getElementById(id);
const esc = (s) => String(s).replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);

function call(f, out) {
  try {
    return JSON.parse(f());
  } catch (e) {
    out.innerHTML = `<p class="error">${esc(e.message ?? e)}</p>`;
    return null;
  }
}

function renderSeq() {
  const out = $("seq-out");
  const r = call(() => explore_seqlogical($("seq").value), out);
  if (!r) return;
  if (!r.valid) {
    out.innerHTML = `<p class="error">${r.violations.map(esc).join("\n")}</p>`;
    return;
  }
  const cells = r.tokens.map((t, i) => `<td class="${r.bio[i][0]}">${esc(t)}</td>`).join("");
  const tags = r.bio.map((b) => `<td>${esc(b)}</td>`).join("");
  out.innerHTML = `<p>intent <b>${esc(r.intent)}</b>, skeleton
      <code>${esc(r.skeleton.intent)} {${r.skeleton.slot_labels.map(esc).join(", ")}}</code></p>
    <table><tr>${cells}</tr><tr>${tags}</tr></table>
    <p>canonical form</p><pre>${esc(r.canonical)}</pre>`;
}

function renderAlign() {
  const out = $("align-out");
  $("lambda-v").textContent = $("lambda").value;
  const r = call(() => align_pair($("corpus").value, +$("pair").value, +$("lambda").value, +$("iters").value), out);
  if (!r) return;
  const has = (set, i, j) => set.some(([a, b]) => a === i && b === j);
  let html = `<table><tr><th></th>${r.target.map((t) => `<th>${esc(t)}</th>`).join("")}</tr>`;
  r.source.forEach((s, i) => {
    html += `<tr><th class="row">${esc(s)}</th>`;
    r.target.forEach((_, j) => {
      const f = has(r.forward, i, j), v = has(r.reverse, i, j), g = has(r.gdfa, i, j);
      const cls = f && v ? "both" : f ? "fwd" : v ? "rev" : "";
      html += `<td class="${cls}">${g ? "●" : ""}</td>`;
    });
    html += "</tr>";
  });
  const ll = r.log_likelihood.map((x) => x.toFixed(3)).join(" → ");
  out.innerHTML = `${html}</table><p>log-likelihood per iteration: ${ll}</p>`;
}

function renderMatch() {
  const out = $("match-out");
  const r = call(() => match_preview($("seed").value, +$("k").value, +$("beam").value), out);
  if (!r) return;
  const neighbors = r.neighbors.map((n) => `<tr><td>${n.distance}</td><td style="text-align:left">${esc(n.text)}</td></tr>`).join("");
  const cands = r.candidates
    .map((c) => `<tr class="${c.verdict === "kept" ? "kept" : "dropped"}"><td>${esc(c.verdict)}</td><td style="text-align:left">${esc(c.text)}</td></tr>`)
    .join("");
  out.innerHTML = `<p>neighbors</p><table><tr><th>distance</th><th>pool example</th></tr>${neighbors}</table>
    <p>candidates: ${r.kept} of ${r.total} kept</p><table><tr><th>verdict</th><th>candidate</th></tr>${cands}</table>`;
}

await init();
$("pool-size").textContent = pool_size();
$("seq").addEventListener("input", renderSeq);
for (const id of ["corpus", "pair", "lambda", "iters"]) $(id).addEventListener("input", renderAlign);
for (const id of ["seed", "k", "beam"]) $(id).addEventListener("input", renderMatch);
renderSeq();
renderAlign();
renderMatch();
