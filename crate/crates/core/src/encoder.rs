//! Embedding network: `x -> W2·relu(W1·x + b1) + b2 -> L2 normalize`.
//!
//! Gradients are computed by hand. The normalization step uses the exact
//! Jacobian of `z / (‖z‖ + eps)` rather than the `eps = 0` approximation, so
//! finite differences agree to rounding error.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Added to the norm before dividing; keeps the zero vector defined.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            out_dim: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Gradient (or moment) tensors with the same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl EncoderGrads {
    pub fn zeros(input_dim: usize, cfg: &EncoderConfig) -> Self {
        Self {
            w1: Array2::zeros((cfg.hidden, input_dim)),
            b1: Array1::zeros(cfg.hidden),
            w2: Array2::zeros((cfg.out_dim, cfg.hidden)),
            b2: Array1::zeros(cfg.out_dim),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Every entry in the fixed order w1, b1, w2, b2.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// First-moment accumulators.
    pub m: EncoderGrads,
    /// Second-moment accumulators.
    pub v: EncoderGrads,
    /// Number of optimizer steps taken.
    pub step: u64,
}

/// Unit-norm embeddings plus what backprop needs from the forward pass.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    embeddings: Array2<f64>,
    input: Array2<f64>,
    pre_hidden: Array2<f64>,
    hidden: Array2<f64>,
    raw: Array2<f64>,
    norms: Array1<f64>,
    step: u64,
}

impl EmbeddingBatch {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Array2<f64> {
        self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases, zero moments.
    pub fn init(input_dim: usize, cfg: &EncoderConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        if input_dim == 0 || cfg.hidden == 0 || cfg.out_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        let w1 = glorot(cfg.hidden, input_dim, rng);
        let w2 = glorot(cfg.out_dim, cfg.hidden, rng);
        Ok(Self {
            w1,
            b1: Array1::zeros(cfg.hidden),
            w2,
            b2: Array1::zeros(cfg.out_dim),
            m: EncoderGrads::zeros(input_dim, cfg),
            v: EncoderGrads::zeros(input_dim, cfg),
            step: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.w1.nrows(),
            out_dim: self.w2.nrows(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<EmbeddingBatch> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let pre_hidden = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre_hidden.mapv(|v| v.max(0.0));
        let raw = hidden.dot(&self.w2.t()) + &self.b2;
        let norms = raw.map_axis(Axis(1), |row| row.dot(&row).sqrt());
        if !norms.iter().all(|n| n.is_finite()) {
            return Err(Error::NonFinite("encoder activations overflowed".into()));
        }
        let mut embeddings = raw.clone();
        for (mut row, &n) in embeddings.rows_mut().into_iter().zip(norms.iter()) {
            row /= n + NORM_EPS;
        }
        Ok(EmbeddingBatch {
            embeddings,
            input: x.to_owned(),
            pre_hidden,
            hidden,
            raw,
            norms,
            step: self.step,
        })
    }

    /// Forward pass that keeps only the embeddings.
    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(EmbeddingBatch::into_embeddings)
    }

    /// Parameter gradients given `dL/dφ`; linear in `grad_embeddings`.
    pub fn backward(
        &self,
        batch: &EmbeddingBatch,
        grad_embeddings: ArrayView2<f64>,
    ) -> Result<EncoderGrads> {
        if batch.step != self.step
            || batch.input.ncols() != self.input_dim()
            || batch.pre_hidden.ncols() != self.w1.nrows()
            || batch.raw.ncols() != self.out_dim()
        {
            return Err(Error::Contract(
                "embedding batch was not produced by these parameters".into(),
            ));
        }
        if grad_embeddings.dim() != batch.embeddings.dim() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match embeddings {:?}",
                grad_embeddings.dim(),
                batch.embeddings.dim()
            )));
        }

        // d/dz of z / (n + eps) applied to g: g/(n+eps) - z (z·g) / (n (n+eps)^2)
        let mut grad_raw = Array2::zeros(batch.raw.dim());
        for (((mut out, z), g), &n) in grad_raw
            .rows_mut()
            .into_iter()
            .zip(batch.raw.rows())
            .zip(grad_embeddings.rows())
            .zip(batch.norms.iter())
        {
            let denom = n + NORM_EPS;
            if n > 0.0 {
                let zg = z.dot(&g);
                Zip::from(&mut out)
                    .and(&z)
                    .and(&g)
                    .for_each(|o, &zi, &gi| *o = gi / denom - zi * zg / (n * denom * denom));
            } else {
                Zip::from(&mut out).and(&g).for_each(|o, &gi| *o = gi / denom);
            }
        }

        let w2 = grad_raw.t().dot(&batch.hidden);
        let b2 = grad_raw.sum_axis(Axis(0));
        let mut grad_pre = grad_raw.dot(&self.w2);
        Zip::from(&mut grad_pre)
            .and(&batch.pre_hidden)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        let w1 = grad_pre.t().dot(&batch.input);
        let b1 = grad_pre.sum_axis(Axis(0));
        Ok(EncoderGrads { w1, b1, w2, b2 })
    }

    /// Bias-corrected Adam update. Fails without touching the parameters if
    /// any gradient entry is non-finite.
    pub fn adam_step(&mut self, grads: &EncoderGrads, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("encoder gradient".into()));
        }
        if grads.w1.dim() != self.w1.dim() || grads.w2.dim() != self.w2.dim() {
            return Err(Error::invalid("gradient shapes do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        macro_rules! update {
            ($field:ident) => {
                Zip::from(&mut self.$field)
                    .and(&mut self.m.$field)
                    .and(&mut self.v.$field)
                    .and(&grads.$field)
                    .for_each(|p, m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    });
            };
        }
        update!(w1);
        update!(b1);
        update!(w2);
        update!(b2);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("encoder");
        c.put_matrix("w1", &self.w1);
        c.put_vector("b1", &self.b1);
        c.put_matrix("w2", &self.w2);
        c.put_vector("b2", &self.b2);
        c.put_matrix("m.w1", &self.m.w1);
        c.put_vector("m.b1", &self.m.b1);
        c.put_matrix("m.w2", &self.m.w2);
        c.put_vector("m.b2", &self.m.b2);
        c.put_matrix("v.w1", &self.v.w1);
        c.put_vector("v.b1", &self.v.b1);
        c.put_matrix("v.w2", &self.v.w2);
        c.put_vector("v.b2", &self.v.b2);
        c.put_scalar("step", self.step as f64);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != "encoder" {
            return Err(Error::invalid(format!(
                "expected an encoder checkpoint, found `{}`",
                c.kind()
            )));
        }
        let grads = |prefix: &str| -> Result<EncoderGrads> {
            Ok(EncoderGrads {
                w1: c.matrix(&format!("{prefix}w1"))?,
                b1: c.vector(&format!("{prefix}b1"))?,
                w2: c.matrix(&format!("{prefix}w2"))?,
                b2: c.vector(&format!("{prefix}b2"))?,
            })
        };
        let p = grads("")?;
        let params = Self {
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            m: grads("m.")?,
            v: grads("v.")?,
            step: c.scalar("step")? as u64,
        };
        let (h, d) = params.w1.dim();
        let (o, h2) = params.w2.dim();
        if h != h2 || params.b1.len() != h || params.b2.len() != o || params.m.w1.dim() != (h, d) {
            return Err(Error::invalid("checkpoint tensors have inconsistent shapes"));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng as _;

    fn setup(d_in: usize, seed: u64) -> (EncoderParams, Array2<f64>) {
        let mut r = rng::seeded(seed);
        let cfg = EncoderConfig { hidden: 7, out_dim: 4 };
        let mut p = EncoderParams::init(d_in, &cfg, &mut r).unwrap();
        p.b1.mapv_inplace(|_| r.random_range(-0.3..0.3));
        p.b2.mapv_inplace(|_| r.random_range(-0.3..0.3));
        let x = Array2::from_shape_simple_fn((3, d_in), || r.random_range(-1.0..1.0));
        (p, x)
    }

    #[test]
    fn rows_are_unit_norm() {
        let (p, x) = setup(5, 1);
        let e = p.embed(x.view()).unwrap();
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_rows_embed_identically() {
        let (p, x) = setup(5, 2);
        let mut xx = x.clone();
        xx.row_mut(2).assign(&x.row(0));
        let e = p.embed(xx.view()).unwrap();
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (p, _) = setup(5, 3);
        assert!(p.forward(Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn zero_vector_is_defined() {
        let cfg = EncoderConfig { hidden: 3, out_dim: 2 };
        let mut p = EncoderParams::init(2, &cfg, &mut rng::seeded(0)).unwrap();
        p.w2.fill(0.0);
        let b = p.forward(Array2::ones((1, 2)).view()).unwrap();
        assert!(b.embeddings().iter().all(|v| *v == 0.0));
        let g = p.backward(&b, Array2::ones((1, 2)).view()).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn backward_is_linear() {
        let (p, x) = setup(5, 4);
        let b = p.forward(x.view()).unwrap();
        let zero = p.backward(&b, Array2::zeros((3, 4)).view()).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let g = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let g1 = p.backward(&b, g.view()).unwrap();
        let g2 = p.backward(&b, (&g * 2.0).view()).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let (mut p, x) = setup(5, 5);
        let b = p.forward(x.view()).unwrap();
        let g = p.backward(&b, Array2::ones((3, 4)).view()).unwrap();
        p.adam_step(&g, &AdamConfig::default()).unwrap();
        assert!(matches!(
            p.backward(&b, Array2::ones((3, 4)).view()),
            Err(Error::Contract(_))
        ));
        assert!(p.backward(&p.forward(x.view()).unwrap(), Array2::ones((2, 4)).view()).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut p, _) = setup(5, 6);
        let before = p.clone();
        let zeros = EncoderGrads::zeros(5, &p.config());
        p.adam_step(&zeros, &AdamConfig::default()).unwrap();
        assert_eq!(p.w1, before.w1);
        assert_eq!(p.b2, before.b2);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut p, _) = setup(5, 7);
        let before = p.clone();
        let mut g = EncoderGrads::zeros(5, &p.config());
        g.w1[[0, 0]] = 3.7;
        g.b2[1] = -0.02;
        let cfg = AdamConfig::default();
        p.adam_step(&g, &cfg).unwrap();
        assert!((before.w1[[0, 0]] - p.w1[[0, 0]] - cfg.lr).abs() < 1e-9);
        assert!((p.b2[1] - before.b2[1] - cfg.lr).abs() < 1e-9);
        assert_eq!(p.w1[[1, 1]], before.w1[[1, 1]]);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let (p, x) = setup(5, 8);
        let b = p.forward(x.view()).unwrap();
        let g = p.backward(&b, Array2::ones((3, 4)).view()).unwrap();
        let mut a = p.clone();
        let mut c = p.clone();
        a.adam_step(&g, &AdamConfig::default()).unwrap();
        c.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(a, c);
        let mut bad = g.clone();
        bad.b1[0] = f64::NAN;
        let mut d = p.clone();
        assert!(matches!(d.adam_step(&bad, &AdamConfig::default()), Err(Error::NonFinite(_))));
        assert_eq!(d, p);
        let lr0 = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(d.adam_step(&g, &lr0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut p, x) = setup(5, 9);
        let b = p.forward(x.view()).unwrap();
        let g = p.backward(&b, Array2::ones((3, 4)).view()).unwrap();
        p.adam_step(&g, &AdamConfig::default()).unwrap();
        let text = p.to_checkpoint().to_text();
        let back = EncoderParams::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
