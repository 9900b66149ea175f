use super::network::{Gradients, Network};
use super::NnError;

/// Optimizer constants. Defaults follow Kingma & Ba.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamMoments {
    /// Fresh (zeroed) moments for blocks of the given lengths.
    pub fn new(block_lens: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let lens: Vec<usize> = block_lens.into_iter().collect();
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            config,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(net.blocks().iter().map(|b| b.values.len()), AdamConfig::default())
    }

    /// One bias-corrected update over parallel parameter / gradient blocks.
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::BadLearningRate(lr));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(super::ShapeError::new(
                "adam blocks",
                format!("{} blocks", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            )
            .into());
        }
        for (b, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(super::ShapeError::new(
                    format!("adam block {b}"),
                    format!("{} values", m.len()),
                    format!("{} params / {} grads", p.len(), g.len()),
                )
                .into());
            }
            if let Some(element) = g.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient { block: b, element });
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update of `grads` to `params`.
pub fn adam_step(
    params: &mut Network,
    grads: &Gradients,
    moments: &mut AdamMoments,
    lr: f64,
) -> Result<(), NnError> {
    let g = grads.blocks();
    let g: Vec<&[f64]> = g.iter().map(|b| b.values).collect();
    let mut p = params.blocks_mut();
    moments.step(&mut p, &g, lr)
}
