//! Synthetic-population generator with exact ground truth: controllable
//! dependence of within-row propensities on the marginal row proportions,
//! nested random effects, covariates, and the two-station paradox fixture.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::model::{
    CovariateVector, DatasetMeta, IndividualTable, TransitionMatrix, UnitAggregate,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_units: usize,
    pub n_seats: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Poisson mean of unit sizes (floored at 1)
    pub mean_unit_size: f64,
    /// Dirichlet concentration for the row-marginal law, length R
    pub dirichlet_concentration: Vec<f64>,
    /// R x (C-1) x R slopes linking centered row proportions to cell logits;
    /// all zero is exactly the no-bias case
    pub bias_slopes: Vec<Vec<Vec<f64>>>,
    /// Beta means of the q unit-level covariates
    pub covariate_means: Vec<f64>,
    /// Beta concentration (pseudo-sample-size) shared by all covariates
    pub covariate_concentration: f64,
    /// R x (C-1) x q slopes of centered covariates on cell logits
    pub covariate_slopes: Vec<Vec<Vec<f64>>>,
    pub sigma_station: f64,
    pub sigma_seat: f64,
    /// draw a separate station/seat effect for each row instead of a shared one
    pub per_group_effects: bool,
    /// base transition matrix, R x C row-stochastic
    pub base_pi: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// A no-bias, no-random-effect baseline around `base_pi`.
    pub fn no_bias(
        n_units: usize,
        n_seats: usize,
        base_pi: Vec<Vec<f64>>,
        mean_unit_size: f64,
        seed: u64,
    ) -> Self {
        let r = base_pi.len();
        let c = base_pi[0].len();
        Self {
            n_units,
            n_seats,
            n_rows: r,
            n_cols: c,
            mean_unit_size,
            dirichlet_concentration: vec![2.0; r],
            bias_slopes: vec![vec![vec![0.0; r]; c - 1]; r],
            covariate_means: vec![],
            covariate_concentration: 100.0,
            covariate_slopes: vec![vec![vec![]; c - 1]; r],
            sigma_station: 0.0,
            sigma_seat: 0.0,
            per_group_effects: false,
            base_pi,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = (self.n_rows, self.n_cols);
        if self.n_units == 0 || self.n_seats == 0 || self.n_seats > self.n_units {
            return Err(EcoError::InvalidConfig("need 1 <= seats <= units".into()));
        }
        if self.mean_unit_size < 1.0 {
            return Err(EcoError::InvalidConfig(
                "mean unit size must be >= 1".into(),
            ));
        }
        if self.dirichlet_concentration.len() != r
            || self.dirichlet_concentration.iter().any(|&a| a <= 0.0)
        {
            return Err(EcoError::InvalidConfig(
                "Dirichlet concentration must be length R and positive".into(),
            ));
        }
        if self.sigma_station < 0.0 || self.sigma_seat < 0.0 {
            return Err(EcoError::InvalidConfig("sigmas must be nonnegative".into()));
        }
        if self.base_pi.len() != r || self.base_pi.iter().any(|row| row.len() != c) {
            return Err(EcoError::InvalidConfig("base_pi must be R x C".into()));
        }
        TransitionMatrix::new(self.base_pi.clone())
            .map_err(|e| EcoError::InvalidConfig(format!("base_pi: {e}")))?;
        let q = self.covariate_means.len();
        let shape_ok = |s: &Vec<Vec<Vec<f64>>>, inner: usize| {
            s.len() == r
                && s.iter()
                    .all(|m| m.len() == c - 1 && m.iter().all(|v| v.len() == inner))
        };
        if !shape_ok(&self.bias_slopes, r) {
            return Err(EcoError::InvalidConfig(
                "bias_slopes must be R x (C-1) x R".into(),
            ));
        }
        if !shape_ok(&self.covariate_slopes, q) {
            return Err(EcoError::InvalidConfig(
                "covariate_slopes must be R x (C-1) x q".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub base_pi: Vec<Vec<f64>>,
    /// per-unit transition matrices actually used to draw the tables
    pub unit_pi: Vec<Vec<Vec<f64>>>,
    pub sigma_station: f64,
    pub sigma_seat: f64,
    pub bias_slopes: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    /// Population-average transition matrix: mean of the per-unit matrices.
    pub fn mean_pi(&self) -> TransitionMatrix {
        let r = self.base_pi.len();
        let c = self.base_pi[0].len();
        let n = self.unit_pi.len() as f64;
        let mut acc = vec![vec![0.0; c]; r];
        for pi_u in &self.unit_pi {
            for i in 0..r {
                for j in 0..c {
                    acc[i][j] += pi_u[i][j] / n;
                }
            }
        }
        // tidy rounding so rows sum to exactly 1 within tolerance
        for row in acc.iter_mut() {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        TransitionMatrix::new(acc).expect("averaged rows are stochastic")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub meta: DatasetMeta,
    pub units: Vec<UnitAggregate>,
    pub tables: Vec<IndividualTable>,
    pub covariates: Vec<CovariateVector>,
    pub truth: GroundTruth,
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over a stream-tagged counter
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn dirichlet(rng: &mut impl Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).unwrap().sample(rng).max(1e-300))
        .collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / s).collect()
}

fn multinomial(rng: &mut impl Rng, n: u64, p: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; p.len()];
    let mut remaining = n;
    let mut rest = 1.0;
    for (k, &pk) in p.iter().enumerate() {
        if k == p.len() - 1 {
            out[k] = remaining;
            break;
        }
        if remaining == 0 {
            break;
        }
        let cond = (pk / rest).clamp(0.0, 1.0);
        let d = rand_distr::Binomial::new(remaining, cond).unwrap();
        let draw = d.sample(rng);
        out[k] = draw;
        remaining -= draw;
        rest -= pk;
        if rest <= 0.0 {
            break;
        }
    }
    out
}

fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    // categories 1..C-1 carry the logits, category C is the reference at 0
    let mut full: Vec<f64> = logits.to_vec();
    full.push(0.0);
    let m = full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = full.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Draw a full synthetic population. Deterministic given the config seed:
/// every unit and seat has its own counter-derived RNG stream.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticPopulation> {
    config.validate()?;
    let r = config.n_rows;
    let c = config.n_cols;
    let q = config.covariate_means.len();

    // seat effects
    let n_effect_cols = if config.per_group_effects { r } else { 1 };
    let mut seat_effects = vec![vec![0.0; n_effect_cols]; config.n_seats];
    for (s, eff) in seat_effects.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1, s as u64));
        for e in eff.iter_mut() {
            *e = if config.sigma_seat > 0.0 {
                Normal::new(0.0, config.sigma_seat)
                    .unwrap()
                    .sample(&mut rng)
            } else {
                0.0
            };
        }
    }

    let mut units = Vec::with_capacity(config.n_units);
    let mut tables = Vec::with_capacity(config.n_units);
    let mut covariates = Vec::with_capacity(config.n_units);
    let mut unit_pi = Vec::with_capacity(config.n_units);
    let mut seat_of_unit = BTreeMap::new();

    for u in 0..config.n_units {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2, u as u64));
        let seat = u * config.n_seats / config.n_units;
        let unit_id = format!("u{u:05}");
        let seat_id = format!("seat_{seat:03}");
        seat_of_unit.insert(unit_id.clone(), seat_id);

        let t_drawn = dirichlet(&mut rng, &config.dirichlet_concentration);
        let n_u = (Poisson::new(config.mean_unit_size)
            .unwrap()
            .sample(&mut rng) as u64)
            .max(1);
        let x = multinomial(&mut rng, n_u, &t_drawn);
        let t_real: Vec<f64> = x.iter().map(|&xi| xi as f64 / n_u as f64).collect();

        let z: Vec<f64> = config
            .covariate_means
            .iter()
            .map(|&m| {
                let a = m * config.covariate_concentration;
                let b = (1.0 - m) * config.covariate_concentration;
                Beta::new(a, b).unwrap().sample(&mut rng)
            })
            .collect();

        let mut station_effect = vec![0.0; n_effect_cols];
        if config.sigma_station > 0.0 {
            let norm = Normal::new(0.0, config.sigma_station).unwrap();
            for e in station_effect.iter_mut() {
                *e = norm.sample(&mut rng);
            }
        }

        let mut pi_u = vec![vec![0.0; c]; r];
        let mut counts = vec![vec![0u64; c]; r];
        for i in 0..r {
            let eff_idx = if config.per_group_effects { i } else { 0 };
            let re = seat_effects[seat][eff_idx] + station_effect[eff_idx];
            let mut logits = Vec::with_capacity(c - 1);
            for j in 0..c - 1 {
                let base =
                    (config.base_pi[i][j].max(1e-12) / config.base_pi[i][c - 1].max(1e-12)).ln();
                let mut eta = base + re;
                for (rr, &tr) in t_real.iter().enumerate() {
                    eta += config.bias_slopes[i][j][rr] * (tr - 1.0 / r as f64);
                }
                for m in 0..q {
                    eta += config.covariate_slopes[i][j][m] * (z[m] - config.covariate_means[m]);
                }
                logits.push(eta);
            }
            let p = softmax_with_reference(&logits);
            let row_counts = multinomial(&mut rng, x[i], &p);
            pi_u[i] = p;
            counts[i] = row_counts;
        }

        let table = IndividualTable::new(unit_id.clone(), counts)?;
        units.push(table.aggregate());
        tables.push(table);
        if q > 0 {
            covariates.push(CovariateVector { unit_id, z });
        }
        unit_pi.push(pi_u);
    }

    let meta = DatasetMeta::new(
        r,
        c,
        (0..r).map(|i| format!("row_{i}")).collect(),
        (0..c).map(|j| format!("col_{j}")).collect(),
        seat_of_unit,
    )?;

    Ok(SyntheticPopulation {
        meta,
        units,
        tables,
        covariates,
        truth: GroundTruth {
            base_pi: config.base_pi.clone(),
            unit_pi,
            sigma_station: config.sigma_station,
            sigma_seat: config.sigma_seat,
            bias_slopes: config.bias_slopes.clone(),
        },
    })
}

/// The two-polling-station paradox, scaled to integer counts.
///
/// Joint proportions are ((0.25,0.55),(0.05,0.15)) for station 1 and
/// ((0.30,0.10),(0.30,0.30)) for station 2, rows (F, M), columns (No, Yes).
pub fn paradox_fixture(scale: u64) -> Result<SyntheticPopulation> {
    if scale < 20 {
        return Err(EcoError::InvalidConfig(
            "scale must be at least 20 for integral counts".into(),
        ));
    }
    let props: [[[f64; 2]; 2]; 2] = [[[0.25, 0.55], [0.05, 0.15]], [[0.30, 0.10], [0.30, 0.30]]];
    let mut tables = Vec::new();
    for (u, station) in props.iter().enumerate() {
        let mut counts = vec![vec![0u64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let exact = station[i][j] * scale as f64;
                if (exact - exact.round()).abs() > 1e-9 {
                    return Err(EcoError::InvalidConfig(format!(
                        "scale {scale} makes count {exact} non-integral"
                    )));
                }
                counts[i][j] = exact.round() as u64;
            }
        }
        tables.push(IndividualTable::new(format!("station_{}", u + 1), counts)?);
    }
    let units: Vec<UnitAggregate> = tables.iter().map(|t| t.aggregate()).collect();
    let unit_pi: Vec<Vec<Vec<f64>>> = tables.iter().map(|t| t.row_proportions()).collect();
    let meta = DatasetMeta::new(
        2,
        2,
        vec!["F".into(), "M".into()],
        vec!["No".into(), "Yes".into()],
        units
            .iter()
            .map(|u| (u.unit_id.clone(), "seat_0".to_string()))
            .collect(),
    )?;
    // pooled proportions stand in for the base matrix; the per-unit
    // matrices are the real ground truth here
    let pooled = crate::multilevel::raw_estimates(&tables)?;
    Ok(SyntheticPopulation {
        meta,
        units,
        tables,
        covariates: vec![],
        truth: GroundTruth {
            base_pi: pooled.rows().to_vec(),
            unit_pi,
            sigma_station: 0.0,
            sigma_seat: 0.0,
            bias_slopes: vec![vec![vec![0.0; 2]; 1]; 2],
        },
    })
}

/// Age-group labels shared by the municipal-primary configuration.
pub const AGE_GROUPS: [&str; 6] = ["18-25", "25-30", "30-45", "45-65", "65-75", "over75"];

/// Voting proportions by sex and age used as the base matrix (column "vote"),
/// males first then females, ages as in `AGE_GROUPS`.
pub const PRIMARY_VOTE_RATES: [f64; 12] = [
    0.0442, 0.0448, 0.0478, 0.0688, 0.0654, 0.0345, // males
    0.0435, 0.0467, 0.0445, 0.0647, 0.0427, 0.0156, // females
];

// eligible-voter counts by sex and age, males then females
const PRIMARY_ELIGIBLE: [f64; 12] = [
    32417.0, 22015.0, 70091.0, 89798.0, 29725.0, 21586.0, //
    30490.0, 21109.0, 73397.0, 99564.0, 36201.0, 38012.0,
];

/// A 593-station / 31-seat configuration calibrated to the weak-association,
/// strong-bias regime: small voting probabilities, sizeable random effects
/// at both levels, and propensities that rise with the share of older
/// eligible voters and fall with the share of younger ones.
pub fn municipal_primary_config() -> GeneratorConfig {
    let r = 12;
    let c = 2;
    let base_pi: Vec<Vec<f64>> = PRIMARY_VOTE_RATES
        .iter()
        .map(|&p| vec![p, 1.0 - p])
        .collect();
    let total: f64 = PRIMARY_ELIGIBLE.iter().sum();
    let concentration: Vec<f64> = PRIMARY_ELIGIBLE.iter().map(|&e| 80.0 * e / total).collect();

    // direction of the propensity-on-share dependence per age group
    let age_direction = [-1.0, -1.0, -0.5, 1.0, 1.0, 0.5];
    let mut bias = vec![vec![vec![0.0; r]; c - 1]; r];
    for i in 0..r {
        for rr in 0..r {
            bias[i][0][rr] = 6.0 * age_direction[i % 6] * age_direction[rr % 6];
        }
    }

    // two party-vote-share covariates with modest positive effects on turnout
    let covariate_means = vec![0.038, 0.051];
    let mut cov_slopes = vec![vec![vec![0.0; 2]; c - 1]; r];
    for row in cov_slopes.iter_mut() {
        row[0][0] = 10.0;
        row[0][1] = 4.0;
    }

    GeneratorConfig {
        n_units: 593,
        n_seats: 31,
        n_rows: r,
        n_cols: c,
        mean_unit_size: 950.0,
        dirichlet_concentration: concentration,
        bias_slopes: bias,
        covariate_means,
        covariate_concentration: 400.0,
        covariate_slopes: cov_slopes,
        sigma_station: 0.2311,
        sigma_seat: 0.2547,
        per_group_effects: false,
        base_pi,
        seed: 20120304,
    }
}
