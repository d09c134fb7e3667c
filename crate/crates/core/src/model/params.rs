use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{MpgatError, Result};
use crate::graph::Direction;

/// P-GAT branch: attention vector `[2·D″]` and the mixer that maps the
/// concatenated propagation states `[(U+1)·D″, D″]` back to `D″`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights<T> {
    pub attention: T,
    pub mixer: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    /// `[D″, D″, K]`
    pub filter: T,
    /// `[D″, D″, K]`
    pub gate: T,
    /// `[D″, D″]`
    pub residual: T,
    /// `[D″, d_skip]`
    pub skip: T,
    /// One branch per [`Direction::ALL`] entry.
    pub branches: Vec<BranchWeights<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub hidden: T,
    pub hidden_bias: T,
    pub out: T,
    pub out_bias: T,
}

/// Full parameter set, generic so the same layout carries tensors, tape
/// handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `[F, D′]`, one scalar-to-vector lift per feature channel.
    pub input_projection: T,
    /// M-GAT attention vectors, `[2·D′]` each.
    pub mgat: Vec<T>,
    /// `[D′, D″]`
    pub post_mgat: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: HeadWeights<T>,
}

pub type MpgatParams = Weights<Tensor>;

fn branch_name(i: usize) -> &'static str {
    match Direction::ALL.get(i) {
        Some(Direction::Forward) => "forward",
        Some(Direction::Backward) => "backward",
        _ => "global",
    }
}

impl<T> Weights<T> {
    /// Visits every parameter with its dotted name, in a fixed order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        f("input_projection".into(), &self.input_projection);
        for (i, w) in self.mgat.iter().enumerate() {
            f(format!("mgat.{i}.attention"), w);
        }
        f("post_mgat".into(), &self.post_mgat);
        for (b, blk) in self.blocks.iter().enumerate() {
            f(format!("blocks.{b}.filter"), &blk.filter);
            f(format!("blocks.{b}.gate"), &blk.gate);
            for (i, br) in blk.branches.iter().enumerate() {
                f(format!("blocks.{b}.{}.attention", branch_name(i)), &br.attention);
                f(format!("blocks.{b}.{}.mixer", branch_name(i)), &br.mixer);
            }
            f(format!("blocks.{b}.residual"), &blk.residual);
            f(format!("blocks.{b}.skip"), &blk.skip);
        }
        f("head.hidden".into(), &self.head.hidden);
        f("head.hidden_bias".into(), &self.head.hidden_bias);
        f("head.out".into(), &self.head.out);
        f("head.out_bias".into(), &self.head.out_bias);
    }

    /// Mutable counterpart of [`Weights::for_each`], same order.
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.input_projection];
        out.extend(self.mgat.iter_mut());
        out.push(&mut self.post_mgat);
        for blk in &mut self.blocks {
            out.push(&mut blk.filter);
            out.push(&mut blk.gate);
            for br in &mut blk.branches {
                out.push(&mut br.attention);
                out.push(&mut br.mixer);
            }
            out.push(&mut blk.residual);
            out.push(&mut blk.skip);
        }
        out.push(&mut self.head.hidden);
        out.push(&mut self.head.hidden_bias);
        out.push(&mut self.head.out);
        out.push(&mut self.head.out_bias);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n));
        names
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            input_projection: f(&self.input_projection),
            mgat: self.mgat.iter().map(&mut f).collect(),
            post_mgat: f(&self.post_mgat),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    filter: f(&b.filter),
                    gate: f(&b.gate),
                    branches: b
                        .branches
                        .iter()
                        .map(|br| BranchWeights {
                            attention: f(&br.attention),
                            mixer: f(&br.mixer),
                        })
                        .collect(),
                    residual: f(&b.residual),
                    skip: f(&b.skip),
                })
                .collect(),
            head: HeadWeights {
                hidden: f(&self.head.hidden),
                hidden_bias: f(&self.head.hidden_bias),
                out: f(&self.head.out),
                out_bias: f(&self.head.out_bias),
            },
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape matches").with_grad()
}

impl Weights<Tensor> {
    /// Glorot-uniform initialisation; biases start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, dl, dr, k) = (cfg.n_features, cfg.d_latent, cfg.d_residual, cfg.kernel);
        let (ds, de, u) = (cfg.d_skip, cfg.d_end, cfg.prop_steps);
        let input_projection = uniform(&mut rng, &[f, dl], 1, dl);
        let mgat = (0..cfg.mgat_layers)
            .map(|_| uniform(&mut rng, &[2 * dl], 2 * dl, 1))
            .collect();
        let post_mgat = uniform(&mut rng, &[dl, dr], dl, dr);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                filter: uniform(&mut rng, &[dr, dr, k], dr * k, dr),
                gate: uniform(&mut rng, &[dr, dr, k], dr * k, dr),
                branches: Direction::ALL
                    .iter()
                    .map(|_| BranchWeights {
                        attention: uniform(&mut rng, &[2 * dr], 2 * dr, 1),
                        mixer: uniform(&mut rng, &[(u + 1) * dr, dr], (u + 1) * dr, dr),
                    })
                    .collect(),
                residual: uniform(&mut rng, &[dr, dr], dr, dr),
                skip: uniform(&mut rng, &[dr, ds], dr, ds),
            })
            .collect();
        let head = HeadWeights {
            hidden: uniform(&mut rng, &[ds, de], ds, de),
            hidden_bias: Tensor::zeros([de]).with_grad(),
            out: uniform(&mut rng, &[de, cfg.t_out], de, cfg.t_out),
            out_bias: Tensor::zeros([cfg.t_out]).with_grad(),
        };
        Self {
            input_projection,
            mgat,
            post_mgat,
            blocks,
            head,
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> Weights<Var> {
        self.map(|t| tape.leaf(t))
    }

    /// Adds the gradients recorded for `vars` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &Weights<Var>) -> Result<()> {
        let mut handles = Vec::new();
        vars.for_each(|_, v| handles.push(*v));
        for (t, v) in self.iter_mut().into_iter().zip(handles) {
            tape.accumulate_grad(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n, t)));
        out
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must
    /// be present with its expected shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let names = self.names();
        if entries.len() != names.len() {
            return Err(MpgatError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                names.len()
            )));
        }
        for ((name, slot), (entry_name, entry)) in names.iter().zip(self.iter_mut()).zip(entries) {
            if name != entry_name || slot.shape() != entry.shape() {
                return Err(MpgatError::Checkpoint(format!(
                    "checkpoint entry {entry_name} {:?} does not match {name} {:?}",
                    entry.shape(),
                    slot.shape()
                )));
            }
            slot.values_mut().copy_from_slice(entry.values());
        }
        Ok(())
    }
}
