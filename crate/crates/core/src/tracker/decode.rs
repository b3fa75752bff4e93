//! Map decoder: cross-attention blocks over BEV cells plus point, class,
//! and score heads.

use crate::error::TensorError;
use crate::geometry::GridWindow;
use crate::tensor::{Init, ParameterStore, Tape, Var};
use crate::world::NUM_CLASSES;

/// Initial score-head bias: sigmoid(-2.2) ~ 0.1, keeping early frames from
/// spawning tracks off noise before the score head has learned anything.
const SCORE_BIAS_INIT: f64 = -2.2;

/// Parameter namespace of the decoder. Key/value projections are shared
/// across blocks; each block owns its query/output projections and
/// feed-forward layers. Point coordinates come out tanh-bounded and are
/// scaled to window meters, so a zero point head decodes to the window
/// center.
#[derive(Debug, Clone)]
pub struct DecodeNet {
    pub c: usize,
    pub blocks: usize,
    pub n_points: usize,
    center: (f64, f64),
    half: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOutput {
    /// Final query embeddings [n, c].
    pub embeddings: Var,
    /// Decoded polylines [n, n_points*2] in meters (x, y interleaved).
    pub points: Var,
    /// Class logits [n, 3].
    pub class_logits: Var,
    /// Sigmoid scores [n, 1].
    pub scores: Var,
}

impl DecodeNet {
    pub fn register(
        store: &mut ParameterStore,
        c: usize,
        blocks: usize,
        n_points: usize,
        window: &GridWindow,
    ) -> Self {
        let fan = Init::UniformFanIn { fan_in: c };
        store.ensure("decode.wk", &[c, c], fan);
        store.ensure("decode.bk", &[c], Init::Zeros);
        store.ensure("decode.wv", &[c, c], fan);
        store.ensure("decode.bv", &[c], Init::Zeros);
        for d in 0..blocks {
            store.ensure(&format!("decode.block{d}.wq"), &[c, c], fan);
            store.ensure(&format!("decode.block{d}.bq"), &[c], Init::Zeros);
            store.ensure(&format!("decode.block{d}.wo"), &[c, c], fan);
            store.ensure(&format!("decode.block{d}.bo"), &[c], Init::Zeros);
            store.ensure(&format!("decode.block{d}.ffn.w0"), &[c, 2 * c], fan);
            store.ensure(&format!("decode.block{d}.ffn.b0"), &[2 * c], Init::Zeros);
            store.ensure(
                &format!("decode.block{d}.ffn.w1"),
                &[2 * c, c],
                Init::UniformFanIn { fan_in: 2 * c },
            );
            store.ensure(&format!("decode.block{d}.ffn.b1"), &[c], Init::Zeros);
        }
        store.ensure("decode.point.w0", &[c, c], fan);
        store.ensure("decode.point.b0", &[c], Init::Zeros);
        store.ensure("decode.point.w1", &[c, n_points * 2], fan);
        store.ensure("decode.point.b1", &[n_points * 2], Init::Zeros);
        store.ensure("decode.class.w", &[c, NUM_CLASSES], fan);
        store.ensure("decode.class.b", &[NUM_CLASSES], Init::Zeros);
        store.ensure("decode.score.w", &[c, 1], fan);
        store.ensure("decode.score.b", &[1], Init::Const(SCORE_BIAS_INIT));
        Self {
            c,
            blocks,
            n_points,
            center: window.center(),
            half: window.half_extents(),
        }
    }

    /// Decode queries against the positional-enriched BEV features `f_kv`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        queries: Var,
        f_kv: Var,
    ) -> Result<DecodeOutput, TensorError> {
        let wk = tape.param(store, "decode.wk")?;
        let bk = tape.param(store, "decode.bk")?;
        let wv = tape.param(store, "decode.wv")?;
        let bv = tape.param(store, "decode.bv")?;
        let k = tape.linear(f_kv, wk, bk)?;
        let v = tape.linear(f_kv, wv, bv)?;

        let mut q = queries;
        for d in 0..self.blocks {
            let wq = tape.param(store, &format!("decode.block{d}.wq"))?;
            let bq = tape.param(store, &format!("decode.block{d}.bq"))?;
            let qp = tape.linear(q, wq, bq)?;
            let attn = tape.masked_attention(qp, k, v, None)?;
            let wo = tape.param(store, &format!("decode.block{d}.wo"))?;
            let bo = tape.param(store, &format!("decode.block{d}.bo"))?;
            let out = tape.linear(attn, wo, bo)?;
            q = tape.add(q, out)?;
            let w0 = tape.param(store, &format!("decode.block{d}.ffn.w0"))?;
            let b0 = tape.param(store, &format!("decode.block{d}.ffn.b0"))?;
            let w1 = tape.param(store, &format!("decode.block{d}.ffn.w1"))?;
            let b1 = tape.param(store, &format!("decode.block{d}.ffn.b1"))?;
            let h = tape.linear(q, w0, b0)?;
            let h = tape.relu(h);
            let ff = tape.linear(h, w1, b1)?;
            q = tape.add(q, ff)?;
        }

        // Point head: tanh-normalized offsets scaled into the window.
        let w0 = tape.param(store, "decode.point.w0")?;
        let b0 = tape.param(store, "decode.point.b0")?;
        let w1 = tape.param(store, "decode.point.w1")?;
        let b1 = tape.param(store, "decode.point.b1")?;
        let h = tape.linear(q, w0, b0)?;
        let h = tape.relu(h);
        let raw = tape.linear(h, w1, b1)?;
        let bounded = tape.tanh_of(raw);
        let scale_row: Vec<f64> = (0..self.n_points)
            .flat_map(|_| [self.half.0, self.half.1])
            .collect();
        let center_row: Vec<f64> = (0..self.n_points)
            .flat_map(|_| [self.center.0, self.center.1])
            .collect();
        let scale = tape.constant(&scale_row, 1, self.n_points * 2);
        let center = tape.constant(&center_row, 1, self.n_points * 2);
        let scaled = tape.mul_bias(bounded, scale)?;
        let points = tape.add_bias(scaled, center)?;

        let wc = tape.param(store, "decode.class.w")?;
        let bc = tape.param(store, "decode.class.b")?;
        let class_logits = tape.linear(q, wc, bc)?;

        let ws = tape.param(store, "decode.score.w")?;
        let bs = tape.param(store, "decode.score.b")?;
        let score_logits = tape.linear(q, ws, bs)?;
        let scores = tape.sigmoid(score_logits);

        Ok(DecodeOutput {
            embeddings: q,
            points,
            class_logits,
            scores,
        })
    }
}
