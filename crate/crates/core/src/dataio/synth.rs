//! Seeded synthetic basin corpus.
//!
//! Each target is driven by a latent series
//!
//! ```text
//! L_t = α·z(log q_t) + β₁·sin(2πt/365.25) + β₂·cos(2πt/365.25)
//!     + μ·z(M₀_t) + b·s_basin + γ·e_t,      e_t ~ AR(1), unit variance
//! ```
//!
//! mapped to concentration units affinely (min-max variables) or through
//! `exp` (log-min-max variables), so the normalized target is close to
//! affine in `L`.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::interp::{spline_fill, weekly_hold};
use super::schema::{
    classify_land_use, time_feature_defs, time_features, BasinDataset, BasinRecord, DynamicFeature,
    FeatureGroup, LandUse,
};
use crate::error::{Error, Result};
use crate::metrics::DAYS_PER_YEAR;

pub const TARGET_NAMES: [&str; 20] = [
    "Temp", "DO", "pH", "CO2", "TSS", "Cond", "SiO2", "Ca", "Na", "K", "Mg", "SO4", "Cl", "TN", "OrgN", "NO3",
    "NHx", "TP", "PO4", "NPOC",
];

/// Targets normalized with plain min-max; every other target uses the log
/// form.
pub const MINMAX_TARGETS: [&str; 3] = ["Temp", "DO", "pH"];

pub const METEO_NAMES: [&str; 7] = ["pr", "sph", "srad", "tmmn", "tmmx", "pet", "etr"];
pub const RC_NAMES: [&str; 11] = ["pH", "Cond", "Ca", "Mg", "K", "Na", "NH4", "NO3", "Cl", "SO4", "distNTN"];
pub const VEG_NAMES: [&str; 3] = ["LAI", "FAPAR", "NPP"];

pub const STATIC_NAMES: [&str; 49] = [
    "HYDRO_DISTURB_INDX", "BAS_COMPACTNESS", "DRAIN_SQKM", "GEOL_REEDBUSH_DOM", "GEOL_REEDBUSH_DOM_PCT",
    "STREAMS_KM_SQ_KM", "STRAHLER_MAX", "MAINSTEM_SINUOUSITY", "BFI_AVE", "CONTACT", "PCT_1ST_ORDER",
    "PCT_2ND_ORDER", "PCT_3RD_ORDER", "PCT_4TH_ORDER", "PCT_5TH_ORDER", "PCT_6TH_ORDER_OR_MORE", "DDENS_2009",
    "STOR_NOR_2009", "NPDES_MAJ_DENS", "DEVNLCD06", "FORESTNLCD06", "PLANTNLCD06", "WATERNLCD06",
    "WOODYWETNLCD06", "EMERGWETNLCD06", "NITR_APP_KG_SQKM", "PHOS_APP_KG_SQKM", "PESTAPP_KG_SQKM",
    "ECO2_BAS_DOM", "ECO3_BAS_DOM", "NUTR_BAS_DOM", "HLR_BAS_DOM_100M", "PNV_BAS_DOM", "AWCAVE", "PERMAVE",
    "BDAVE", "OMAVE", "WTDEPAVE", "ROCKDEPAVE", "CLAYAVE", "SILTAVE", "KFACT_UP", "RFACT", "ELEV_MEAN_M_BASIN",
    "SLOPE_PCT", "ASPECT_DEGREES", "LAT_GAGE", "LNG_GAGE", "SNOW_PCT_PRECIP",
];

/// Statics normalized with plain min-max.
pub const MINMAX_STATICS: [&str; 2] = ["LAT_GAGE", "LNG_GAGE"];

const URBAN_STATIC: &str = "DEVNLCD06";
const AG_STATIC: &str = "PLANTNLCD06";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableRecipe {
    pub name: String,
    /// Weight on standardized log-runoff.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta_sin: f64,
    #[serde(default)]
    pub beta_cos: f64,
    /// Weight on the standardized first meteorological series.
    #[serde(default)]
    pub meteo: f64,
    /// Weight on a standardized basin attribute, constant within a basin.
    #[serde(default)]
    pub basin: f64,
    /// Weight on AR(1) noise. Ignored when `simplicity` is set.
    #[serde(default)]
    pub gamma: f64,
    /// Target fraction of within-basin variance carried by the runoff and
    /// harmonic terms; the noise weight is solved from it per basin.
    #[serde(default)]
    pub simplicity: Option<f64>,
    #[serde(default = "default_phi")]
    pub ar_phi: f64,
    #[serde(default = "default_p_obs")]
    pub p_obs: f64,
}

fn default_phi() -> f64 {
    0.5
}

fn default_p_obs() -> f64 {
    1.0
}

impl VariableRecipe {
    pub fn new(name: &str) -> Self {
        VariableRecipe {
            name: name.to_string(),
            alpha: 0.0,
            beta_sin: 0.0,
            beta_cos: 0.0,
            meteo: 0.0,
            basin: 0.0,
            gamma: 0.0,
            simplicity: None,
            ar_phi: default_phi(),
            p_obs: default_p_obs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_basins: usize,
    pub start_year: i32,
    pub years: usize,
    #[serde(default = "default_n_meteo")]
    pub n_meteo: usize,
    #[serde(default = "default_n_rc")]
    pub n_rc: usize,
    #[serde(default = "default_n_veg")]
    pub n_veg: usize,
    #[serde(default = "default_n_statics")]
    pub n_statics: usize,
    pub variables: Vec<VariableRecipe>,
    /// Makes the first meteorological series an exact copy of runoff.
    #[serde(default)]
    pub redundant_meteo: bool,
    #[serde(default)]
    pub relaxed_land_use: bool,
}

fn default_n_meteo() -> usize {
    3
}
fn default_n_rc() -> usize {
    2
}
fn default_n_veg() -> usize {
    2
}
fn default_n_statics() -> usize {
    6
}

/// Analytic simplicity of one generated basin-variable series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplicityTruth {
    pub basin: String,
    pub variable: String,
    pub simplicity: f64,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: BasinDataset,
    pub truth: Vec<SimplicityTruth>,
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mu) / sd).collect()
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n
}

/// Stationary AR(1) with unit marginal variance.
fn ar1(rng: &mut ChaCha8Rng, n: usize, phi: f64) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x: f64 = rng.sample(StandardNormal);
    for _ in 0..n {
        out.push(x);
        let e: f64 = rng.sample(StandardNormal);
        x = phi * x + innov * e;
    }
    out
}

fn seasonal(days: &[f64], amp: f64, shift: f64) -> Vec<f64> {
    days.iter()
        .map(|d| amp * (2.0 * std::f64::consts::PI * d / DAYS_PER_YEAR + shift).sin())
        .collect()
}

/// Centre and scale mapping the latent series to concentration units.
fn target_scale(name: &str) -> (f64, f64) {
    match name {
        "Temp" => (12.0, 5.0),
        "DO" => (9.0, 1.5),
        "pH" => (7.4, 0.3),
        _ => {
            let idx = TARGET_NAMES.iter().position(|n| *n == name).unwrap_or(0) as f64;
            (0.2 + 0.15 * idx, 0.4)
        }
    }
}

pub fn is_minmax_target(name: &str) -> bool {
    MINMAX_TARGETS.contains(&name)
}

fn land_use_draw(rng: &mut ChaCha8Rng, class: LandUse, relaxed: bool) -> (f64, f64) {
    match class {
        LandUse::AG => (rng.random_range(0.0..if relaxed { 7.0 } else { 5.0 }), rng.random_range(55.0..90.0)),
        LandUse::UD => (rng.random_range(0.0..5.0), rng.random_range(0.0..25.0)),
        LandUse::UR => (rng.random_range(30.0..70.0), rng.random_range(0.0..25.0)),
        LandUse::MX => (rng.random_range(10.0..20.0), rng.random_range(30.0..45.0)),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_basins == 0 || self.years == 0 {
            return bad("synthetic corpus needs at least one basin and one year".into());
        }
        if self.n_meteo == 0 || self.n_meteo > METEO_NAMES.len() {
            return bad(format!("n_meteo must be in 1..={}", METEO_NAMES.len()));
        }
        if self.n_rc > RC_NAMES.len() || self.n_veg > VEG_NAMES.len() {
            return bad("too many rainfall-chemistry or vegetation series".into());
        }
        if self.n_statics < 2 || self.n_statics > STATIC_NAMES.len() {
            return bad(format!("n_statics must be in 2..={}", STATIC_NAMES.len()));
        }
        if self.variables.is_empty() {
            return bad("no target variables".into());
        }
        for v in &self.variables {
            if !TARGET_NAMES.contains(&v.name.as_str()) {
                return bad(format!("unknown target variable `{}`", v.name));
            }
            if !(v.p_obs > 0.0 && v.p_obs <= 1.0) {
                return bad(format!("p_obs {} for `{}` outside (0, 1]", v.p_obs, v.name));
            }
            if let Some(s) = v.simplicity {
                if !(0.0..=1.0).contains(&s) {
                    return bad(format!("simplicity {s} for `{}` outside [0, 1]", v.name));
                }
            }
            if !(v.ar_phi.abs() < 1.0) {
                return bad(format!("ar_phi {} for `{}` is not stationary", v.ar_phi, v.name));
            }
        }
        let mut names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.variables.len() {
            return bad("duplicate target variable".into());
        }
        Ok(())
    }

    /// Statics used: the urban and agricultural percentages, then the
    /// first remaining names of the attribute list.
    pub fn static_names(&self) -> Vec<String> {
        let mut names = vec![URBAN_STATIC.to_string(), AG_STATIC.to_string()];
        names.extend(
            STATIC_NAMES
                .iter()
                .filter(|n| **n != URBAN_STATIC && **n != AG_STATIC)
                .take(self.n_statics - 2)
                .map(|s| s.to_string()),
        );
        names
    }

    pub fn features(&self) -> Vec<DynamicFeature> {
        let mut f = vec![DynamicFeature::new("runoff", FeatureGroup::Q)];
        f.extend(METEO_NAMES[..self.n_meteo].iter().map(|n| DynamicFeature::new(n, FeatureGroup::M)));
        f.extend(RC_NAMES[..self.n_rc].iter().map(|n| DynamicFeature::new(n, FeatureGroup::RC)));
        f.extend(VEG_NAMES[..self.n_veg].iter().map(|n| DynamicFeature::new(n, FeatureGroup::V)));
        f.extend(time_feature_defs());
        f
    }

    pub fn calendar(&self) -> Result<Vec<NaiveDate>> {
        let start = NaiveDate::from_ymd_opt(self.start_year, 1, 1)
            .ok_or_else(|| Error::Config(format!("invalid start year {}", self.start_year)))?;
        let end = NaiveDate::from_ymd_opt(self.start_year + self.years as i32, 1, 1)
            .ok_or_else(|| Error::Config("calendar end out of range".into()))?;
        Ok(start.iter_days().take_while(|d| *d < end).collect())
    }
}

pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let calendar = config.calendar()?;
    let features = config.features();
    let static_names = config.static_names();
    let target_names: Vec<String> = config.variables.iter().map(|v| v.name.clone()).collect();
    let n = calendar.len();
    let f = features.len();
    let nv = target_names.len();
    let days: Vec<f64> = calendar.iter().map(|d| time_features(*d)[0]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basins = Vec::with_capacity(config.n_basins);
    let mut truth = Vec::new();
    // one standardized attribute drives the between-basin effect
    let basin_signal: Vec<f64> = standardize(&(0..config.n_basins).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());

    for b in 0..config.n_basins {
        let id = format!("B{:03}", b + 1);
        let class = LandUse::ALL[b % LandUse::ALL.len()];
        let (urban, ag) = land_use_draw(&mut rng, class, config.relaxed_land_use);
        let land_use = classify_land_use(urban, ag, config.relaxed_land_use)?;
        let coords = [rng.random_range(-120.0..-70.0), rng.random_range(30.0..48.0)];

        let mut statics = vec![urban, ag];
        for name in &static_names[2..] {
            statics.push(match name.as_str() {
                "LAT_GAGE" => coords[1],
                "LNG_GAGE" => coords[0],
                "BAS_COMPACTNESS" => 1.0 + 4.0 * (basin_signal[b] + 3.0) / 6.0,
                _ => (rng.random_range(-1.0..1.0) as f64).exp() * 10.0,
            });
        }

        // runoff: seasonal log-flow plus persistent anomalies
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let season = seasonal(&days, 0.8, phase);
        let anomaly = ar1(&mut rng, n, 0.9);
        let log_q: Vec<f64> = (0..n).map(|t| season[t] + 0.7 * anomaly[t] - 1.0).collect();
        let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();

        let mut columns: Vec<Vec<f64>> = vec![q.clone()];
        for m in 0..config.n_meteo {
            if m == 0 && config.redundant_meteo {
                columns.push(q.clone());
                continue;
            }
            let s = seasonal(&days, 0.5, rng.random_range(0.0..std::f64::consts::TAU));
            let e = ar1(&mut rng, n, 0.6);
            columns.push((0..n).map(|t| (0.5 * e[t] + s[t]).exp() * (1.0 + m as f64)).collect());
        }
        for _ in 0..config.n_rc {
            let level = rng.random_range(0.5..3.0);
            let mut col = vec![f64::NAN; n];
            for t in (0..n).step_by(7) {
                let e: f64 = rng.sample(StandardNormal);
                col[t] = level * (0.3 * e).exp();
            }
            weekly_hold(&mut col);
            columns.push(col);
        }
        for _ in 0..config.n_veg {
            let s = seasonal(&days, 1.0, rng.random_range(0.0..std::f64::consts::TAU));
            let mut col = vec![f64::NAN; n];
            for t in (0..n).step_by(8) {
                let e: f64 = rng.sample(StandardNormal);
                col[t] = 2.0 + s[t] + 0.1 * e;
            }
            spline_fill(&mut col);
            columns.push(col);
        }

        let mut dynamics = Vec::with_capacity(n * f);
        for t in 0..n {
            for col in &columns {
                dynamics.push(col[t]);
            }
            dynamics.extend(time_features(calendar[t]));
        }

        let zq = standardize(&log_q);
        let zm = standardize(&columns[1].iter().map(|v| v.ln()).collect::<Vec<_>>());
        let mut targets = vec![f64::NAN; n * nv];
        let mut mask = vec![false; n * nv];
        for (j, recipe) in config.variables.iter().enumerate() {
            let tf: Vec<[f64; 3]> = calendar.iter().map(|d| time_features(*d)).collect();
            let explained: Vec<f64> = (0..n)
                .map(|t| recipe.alpha * zq[t] + recipe.beta_sin * tf[t][1] + recipe.beta_cos * tf[t][2])
                .collect();
            let noise = ar1(&mut rng, n, recipe.ar_phi);
            let var_explained = population_variance(&explained);
            let var_noise = population_variance(&noise);
            let other: Vec<f64> = (0..n).map(|t| recipe.meteo * zm[t]).collect();
            let gamma = match recipe.simplicity {
                None => recipe.gamma,
                Some(s) if s >= 1.0 => 0.0,
                Some(s) if var_explained == 0.0 => {
                    if s > 0.0 {
                        return Err(Error::Config(format!(
                            "`{}` asks for simplicity {s} but has no runoff or harmonic terms",
                            recipe.name
                        )));
                    }
                    1.0
                }
                Some(s) => (var_explained * (1.0 - s) / (s * var_noise)).sqrt(),
            };
            let unexplained: Vec<f64> = (0..n).map(|t| other[t] + gamma * noise[t]).collect();
            let var_unexplained = population_variance(&unexplained);
            let total = var_explained + var_unexplained;
            truth.push(SimplicityTruth {
                basin: id.clone(),
                variable: recipe.name.clone(),
                simplicity: if total > 0.0 { var_explained / total } else { 0.0 },
            });
            let (centre, scale) = target_scale(&recipe.name);
            let offset = recipe.basin * basin_signal[b];
            for t in 0..n {
                if recipe.p_obs < 1.0 && rng.random::<f64>() >= recipe.p_obs {
                    continue;
                }
                let latent = explained[t] + unexplained[t] + offset;
                let value = if is_minmax_target(&recipe.name) {
                    centre + scale * latent
                } else {
                    (centre.ln() + scale * latent).exp()
                };
                targets[t * nv + j] = value;
                mask[t * nv + j] = true;
            }
        }

        basins.push(BasinRecord {
            id,
            coords,
            urban_pct: urban,
            ag_pct: ag,
            land_use,
            statics,
            dynamics,
            targets,
            mask,
        });
    }

    let dataset = BasinDataset {
        features,
        static_names,
        target_names,
        calendar,
        basins,
    };
    dataset.validate()?;
    Ok(SynthOutput { dataset, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(vars: Vec<VariableRecipe>) -> SynthConfig {
        SynthConfig {
            n_basins: 4,
            start_year: 2001,
            years: 2,
            n_meteo: 2,
            n_rc: 1,
            n_veg: 1,
            n_statics: 4,
            variables: vars,
            redundant_meteo: false,
            relaxed_land_use: false,
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let mut v = VariableRecipe::new("TN");
        v.alpha = 1.0;
        v.gamma = 0.3;
        v.p_obs = 0.3;
        let cfg = small(vec![v]);
        let a = synthesize(&cfg, 5).unwrap().dataset;
        let b = synthesize(&cfg, 5).unwrap().dataset;
        let c = synthesize(&cfg, 6).unwrap().dataset;
        assert_eq!(a.basins[0].dynamics.len(), b.basins[0].dynamics.len());
        assert!(a.basins.iter().zip(&b.basins).all(|(x, y)| {
            x.dynamics.iter().zip(&y.dynamics).all(|(p, q)| p.to_bits() == q.to_bits())
                && x.mask == y.mask
        }));
        assert_ne!(a.basins[0].mask, c.basins[0].mask);
    }

    #[test]
    fn p_obs_validated() {
        let mut v = VariableRecipe::new("TN");
        v.p_obs = 0.0;
        assert!(matches!(synthesize(&small(vec![v.clone()]), 1), Err(Error::Config(_))));
        v.p_obs = 1.5;
        assert!(synthesize(&small(vec![v]), 1).is_err());
    }

    #[test]
    fn layout_and_land_use() {
        let ds = synthesize(&small(vec![VariableRecipe::new("Temp")]), 2).unwrap().dataset;
        assert_eq!(ds.n_days(), 365 + 365);
        assert_eq!(ds.n_dynamic(), 1 + 2 + 1 + 1 + 3);
        let classes: Vec<LandUse> = ds.basins.iter().map(|b| b.land_use).collect();
        assert_eq!(classes, LandUse::ALL.to_vec());
        for b in &ds.basins {
            assert_eq!(classify_land_use(b.urban_pct, b.ag_pct, false).unwrap(), b.land_use);
            assert!(b.dynamics.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn redundant_meteo_copies_runoff() {
        let mut cfg = small(vec![VariableRecipe::new("Temp")]);
        cfg.redundant_meteo = true;
        let ds = synthesize(&cfg, 3).unwrap().dataset;
        for t in 0..ds.n_days() {
            let row = ds.dynamic_row(&ds.basins[0], t);
            assert_eq!(row[0], row[1]);
        }
    }
}
