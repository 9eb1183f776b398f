import init, { extract_phrase_pairs, memory_attention_probs, bleu_score } from "./pkg/lcmt_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#fde68a", "#bfdbfe", "#bbf7d0", "#fecaca", "#ddd6fe", "#fed7aa"];

function esc(s) {
  return String(s).replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function fail(out, res) {
  if (res.error) {
    out.innerHTML = `<p class="error">${esc(res.error)}</p>`;
    return true;
  }
  return false;
}

function renderExtraction() {
  const out = $("x-out");
  const res = JSON.parse(extract_phrase_pairs(
    $("x-src").value, $("x-tgt").value, $("x-al").value, $("x-ss").value, $("x-ts").value, Number($("x-max").value) || 1,
  ));
  if (fail(out, res)) return;
  const src = $("x-src").value.trim().split(/\s+/);
  const tgt = $("x-tgt").value.trim().split(/\s+/);
  const links = new Set(res.links.map(([i, j]) => `${i},${j}`));
  const color = (i, j) => {
    const k = res.selected.findIndex((p) => p.source[0] <= i && i < p.source[1] && p.target[0] <= j && j < p.target[1]);
    return k < 0 ? "" : COLORS[k % COLORS.length];
  };
  let html = `<table class="grid"><tr><th></th>${tgt.map((w) => `<th>${esc(w)}</th>`).join("")}</tr>`;
  src.forEach((w, i) => {
    html += `<tr><th>${esc(w)}</th>`;
    tgt.forEach((_, j) => {
      const linked = links.has(`${i},${j}`);
      html += `<td class="${linked ? "link" : ""}" style="background:${color(i, j)}">${linked ? "&#9679;" : ""}</td>`;
    });
    html += "</tr>";
  });
  html += "</table>";
  const list = (ps) => ps.map((p) => `${esc(p.source_text)} &rarr; ${esc(p.target_text)}`).join("<br>") || "none";
  html += `<p><b>Selected constraints</b><br>${list(res.selected)}</p>`;
  html += `<p><b>All consistent pairs (${res.candidates.length})</b><br>${list(res.candidates)}</p>`;
  out.innerHTML = html;
}

function renderAttention() {
  const out = $("m-out");
  const res = JSON.parse(memory_attention_probs($("m-keys").value, $("m-q").value, $("m-lab").value));
  if (fail(out, res)) return;
  const slots = res.probs[0].length;
  const head = Array.from({ length: slots }, (_, j) => `<th>${j + 1 === slots ? "none" : `slot ${j + 1}`}</th>`).join("");
  let html = `<table class="grid"><tr><th></th>${head}</tr>`;
  res.probs.forEach((row, i) => {
    html += `<tr><th>query ${i + 1}</th>`;
    row.forEach((p) => {
      html += `<td style="background:rgba(37,99,235,${p.toFixed(3)});color:${p > 0.5 ? "#fff" : "#222"}">${p.toFixed(3)}</td>`;
    });
    html += "</tr>";
  });
  html += "</table>";
  if (res.loss !== null) html += `<p>Attention loss: <b>${res.loss.toFixed(4)}</b></p>`;
  out.innerHTML = html;
}

function renderBleu() {
  const out = $("b-out");
  const res = JSON.parse(bleu_score($("b-hyp").value, $("b-ref").value, $("b-con").value));
  if (fail(out, res)) return;
  const prec = res.precisions.map((p, n) => `p${n + 1} ${(100 * p).toFixed(1)} (${res.matches[n]}/${res.totals[n]})`);
  let text = `BLEU ${res.bleu.toFixed(2)}\n${prec.join("  ")}\nbrevity penalty ${res.brevity_penalty.toFixed(4)}` +
    `  hyp/ref length ${res.hyp_len}/${res.ref_len}`;
  if (res.csr !== null) text += `\nconstraint satisfaction ${(100 * res.csr).toFixed(1)}%`;
  out.innerHTML = `<pre>${esc(text)}</pre>`;
}

await init();
for (const [ids, render] of [
  [["x-src", "x-tgt", "x-al", "x-ss", "x-ts", "x-max"], renderExtraction],
  [["m-keys", "m-q", "m-lab"], renderAttention],
  [["b-hyp", "b-ref", "b-con"], renderBleu],
]) {
  ids.forEach((id) => $(id).addEventListener("input", render));
  render();
}
