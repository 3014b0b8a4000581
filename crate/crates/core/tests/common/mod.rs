#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wqtrust::models::{ModelSpec, Sample};

pub fn random_samples(spec: &ModelSpec, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            basin: i % 3,
            day: i,
            window: (0..spec.seq_len * spec.n_dynamic).map(|_| rng.random_range(0.0..1.0)).collect(),
            statics: (0..spec.n_static).map(|_| rng.random_range(0.0..1.0)).collect(),
            coords: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            target: (0..spec.n_targets).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect()
}

pub fn tiny_spec(family: wqtrust::models::Family) -> ModelSpec {
    use wqtrust::models::Family;
    let mut s = ModelSpec::desk(family, 3, 2, 2);
    match family {
        Family::Recurrent => {
            s.hidden = 4;
            s.seq_len = 4;
            s.dropout = 0.0;
        }
        Family::Operator => {
            s.hidden = 8;
            s.layers = 3;
        }
        Family::Attention => {
            s.hidden = 4;
            s.heads = 2;
            s.ff_dim = 6;
            s.layers = 3;
            s.seq_len = 6;
            s.decoder_window = 2;
        }
    }
    s
}

use ndcore::{Tape, Tensor, Var};
use wqtrust::dataio::{synthesize, BasinDataset, SynthConfig, VariableRecipe};
use wqtrust::models::{InputVars, Regressor};

/// `F(x) = Σ_j w_j·x_{last,j} + Σ_k u_k·s_k`, one output.
pub struct LinearProbe {
    pub seq_len: usize,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

impl Regressor for LinearProbe {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn n_outputs(&self) -> usize {
        1
    }

    fn forward_inputs<'t>(&self, tape: &'t Tape, x: &InputVars<'t>) -> wqtrust::Result<Var<'t>> {
        let last: Vec<Option<usize>> =
            (0..x.batch_size()).map(|k| Some(k * self.seq_len + self.seq_len - 1)).collect();
        let w = tape.constant(Tensor::matrix(self.w.len(), 1, self.w.clone())?);
        let u = tape.constant(Tensor::matrix(self.u.len(), 1, self.u.clone())?);
        Ok(x.dynamic.select_rows(&last)?.matmul(w)?.add(x.statics.matmul(u)?)?)
    }
}

/// Small daily corpus whose targets follow runoff, a harmonic and noise.
pub fn small_corpus(n_basins: usize, years: usize, seed: u64) -> BasinDataset {
    let cfg = SynthConfig {
        n_basins,
        start_year: 2000,
        years,
        n_meteo: 2,
        n_rc: 1,
        n_veg: 1,
        n_statics: 4,
        variables: vec![
            VariableRecipe {
                alpha: 1.0,
                beta_sin: 0.5,
                gamma: 0.2,
                p_obs: 0.7,
                ..VariableRecipe::new("NO3")
            },
            VariableRecipe {
                alpha: 0.5,
                meteo: 0.5,
                gamma: 0.2,
                p_obs: 0.7,
                ..VariableRecipe::new("TP")
            },
        ],
        redundant_meteo: false,
        relaxed_land_use: false,
    };
    synthesize(&cfg, seed).unwrap().dataset
}
