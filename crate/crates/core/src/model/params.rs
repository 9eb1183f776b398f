use super::{ModelConfig, Norm};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::{Element, ParamStore, Tensor};

pub const SRC_EMBED: &str = "src_embed";
pub const TGT_EMBED: &str = "tgt_embed";
pub const OUT_W: &str = "out.w";
pub const OUT_B: &str = "out.b";
pub const MEM_QUERY: &str = "mem.wq";
pub const MEM_LN_G: &str = "mem.ln.g";
pub const MEM_LN_B: &str = "mem.ln.b";
pub const KEY_NONE: &str = "mem.k_none";
pub const VALUE_NONE: &str = "mem.v_none";
/// Final layer norms, present only with pre-normalization.
pub const ENC_LN: &str = "enc.ln";
pub const DEC_LN: &str = "dec.ln";

/// Names of every tensor a memory sublayer adds.
pub const MEMORY_PARAMS: [&str; 5] = [MEM_QUERY, MEM_LN_G, MEM_LN_B, KEY_NONE, VALUE_NONE];

/// Seeded initialization. Embeddings and the none slot draw from N(0, 1),
/// weight matrices from N(0, 1/fan_in); biases start at zero and layer-norm
/// gains at one. Values are drawn in a fixed order so the same seed gives
/// the same model at any precision.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let d = cfg.d_model;
    let f = cfg.ffn_width;
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    let mut normal = |store: &mut ParamStore<T>, name: String, shape: &[usize], std: f64| {
        let t: Tensor<T> = normal_tensor(&mut rng, shape, std);
        store.insert(name, t.with_requires_grad(true));
    };
    let fill = |store: &mut ParamStore<T>, name: String, n: usize, v: f64| {
        let t = Tensor::from_fn(&[n], |_| T::lit(v));
        store.insert(name, t.with_requires_grad(true));
    };
    let w = 1.0 / (d as f64).sqrt();
    let wf = 1.0 / (f as f64).sqrt();

    normal(&mut store, SRC_EMBED.into(), &[cfg.src_vocab, d], 1.0);
    normal(&mut store, TGT_EMBED.into(), &[cfg.tgt_vocab, d], 1.0);
    for side in ["enc", "dec"] {
        for b in 1..=cfg.n_blocks {
            let mut attn = vec!["self"];
            if side == "dec" {
                attn.push("cross");
            }
            for a in attn {
                for p in ["q", "k", "v", "o"] {
                    normal(&mut store, format!("{side}{b}.{a}.w{p}"), &[d, d], w);
                }
            }
            let lns = if side == "dec" { 3 } else { 2 };
            for n in 1..=lns {
                fill(&mut store, format!("{side}{b}.ln{n}.g"), d, 1.0);
                fill(&mut store, format!("{side}{b}.ln{n}.b"), d, 0.0);
            }
            normal(&mut store, format!("{side}{b}.ffn.w1"), &[d, f], w);
            fill(&mut store, format!("{side}{b}.ffn.b1"), f, 0.0);
            normal(&mut store, format!("{side}{b}.ffn.w2"), &[f, d], wf);
            fill(&mut store, format!("{side}{b}.ffn.b2"), d, 0.0);
        }
        if cfg.norm == Norm::Pre {
            fill(&mut store, format!("{side}.ln.g"), d, 1.0);
            fill(&mut store, format!("{side}.ln.b"), d, 0.0);
        }
    }
    normal(&mut store, OUT_W.into(), &[d, cfg.tgt_vocab], w);
    fill(&mut store, OUT_B.into(), cfg.tgt_vocab, 0.0);
    if cfg.has_memory() {
        normal(&mut store, MEM_QUERY.into(), &[d, d], w);
        fill(&mut store, MEM_LN_G.into(), d, 1.0);
        fill(&mut store, MEM_LN_B.into(), d, 0.0);
        normal(&mut store, KEY_NONE.into(), &[d], 1.0);
        normal(&mut store, VALUE_NONE.into(), &[d], 1.0);
    }
    store
}

/// Fixed sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
