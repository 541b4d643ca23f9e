//! Simulated physical channel `y = Hx + n`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::Config(format!(
                "channel.kind must be \"awgn\" or \"rayleigh\", got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
        }
        Ok(ChannelConfig { kind, snr_db, seed })
    }

    /// Per-complex-symbol noise variance for unit-power transmission.
    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }
}

pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// `rows x cols` matrix of complex channel symbols (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    rows: usize,
    cols: usize,
    symbols: Vec<Complex64>,
}

impl SymbolBlock {
    pub fn new(rows: usize, cols: usize, symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} symbols for a {rows}x{cols} block",
                symbols.len()
            )));
        }
        if symbols.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::NonFinite("channel symbol".into()));
        }
        Ok(SymbolBlock { rows, cols, symbols })
    }

    /// Pairs consecutive reals `(re, im)` of each row into complex symbols.
    pub fn from_real_pairs(rows: usize, cols: usize, reals: &[f64]) -> Result<Self> {
        if reals.len() != rows * cols * 2 {
            return Err(Error::Shape(format!(
                "{} reals for a {rows}x{cols} complex block",
                reals.len()
            )));
        }
        let symbols = reals
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Self::new(rows, cols, symbols)
    }

    pub fn to_real_pairs(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn mean_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Scales `x` to unit mean per-symbol power.
pub fn power_normalize(x: &SymbolBlock) -> Result<SymbolBlock> {
    let p = x.mean_power();
    if p == 0.0 {
        return Err(Error::ZeroBlock);
    }
    let s = 1.0 / p.sqrt();
    Ok(SymbolBlock {
        rows: x.rows,
        cols: x.cols,
        symbols: x.symbols.iter().map(|v| v * s).collect(),
    })
}

/// Draws one standard complex Gaussian sample with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * sd, im * sd)
}

/// Passes a unit-power block through the channel; returns `(y, H)`.
pub fn transmit<R: Rng + ?Sized>(
    x: &SymbolBlock,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(SymbolBlock, Complex64)> {
    let p = x.mean_power();
    if (p - 1.0).abs() > 1e-3 {
        return Err(Error::NotNormalized { power: p });
    }
    let h = match cfg.kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => complex_gaussian(rng, 1.0),
    };
    let var = cfg.noise_variance();
    let symbols = x
        .symbols
        .iter()
        .map(|&s| h * s + complex_gaussian(rng, var))
        .collect();
    Ok((
        SymbolBlock {
            rows: x.rows,
            cols: x.cols,
            symbols,
        },
        h,
    ))
}

/// Perfect-CSI equalization `y / H`.
pub fn equalize(y: &SymbolBlock, h: Complex64) -> Result<SymbolBlock> {
    if h.norm_sqr() == 0.0 {
        return Err(Error::ZeroChannel);
    }
    Ok(SymbolBlock {
        rows: y.rows,
        cols: y.cols,
        symbols: y.symbols.iter().map(|&v| v / h).collect(),
    })
}

/// Empirical SNR in dB of `received` against the clean `sent` block.
pub fn empirical_snr_db(sent: &SymbolBlock, received: &SymbolBlock) -> f64 {
    let signal: f64 = sent.symbols.iter().map(|s| s.norm_sqr()).sum();
    let noise: f64 = sent
        .symbols
        .iter()
        .zip(&received.symbols)
        .map(|(a, b)| (b - a).norm_sqr())
        .sum();
    10.0 * (signal / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(rows: usize, cols: usize, seed: u64) -> SymbolBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..rows * cols)
            .map(|_| complex_gaussian(&mut rng, 3.0))
            .collect();
        SymbolBlock::new(rows, cols, s).unwrap()
    }

    #[test]
    fn magnitude_two_becomes_magnitude_one() {
        let x = SymbolBlock::new(1, 3, vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(0.0, -2.0),
            Complex64::from_polar(2.0, 0.7),
        ])
        .unwrap();
        let y = power_normalize(&x).unwrap();
        for s in y.symbols() {
            assert!((s.norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            power_normalize(&SymbolBlock::new(1, 2, vec![Complex64::new(0.0, 0.0); 2]).unwrap()),
            Err(Error::ZeroBlock)
        ));
    }

    #[test]
    fn noiseless_limit_returns_input() {
        let x = power_normalize(&random_block(4, 8, 1)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, 300.0, 0).unwrap();
        let (y, h) = transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(h, Complex64::new(1.0, 0.0));
        for (a, b) in x.symbols().iter().zip(y.symbols()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let x = random_block(2, 2, 3);
        let cfg = ChannelConfig::default();
        assert!(matches!(
            transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn noise_power_at_zero_db() {
        let x = power_normalize(&random_block(1000, 100, 2)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, 0.0, 5).unwrap();
        let (y, _) = transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let noise: f64 = x
            .symbols()
            .iter()
            .zip(y.symbols())
            .map(|(a, b)| (b - a).norm_sqr())
            .sum::<f64>()
            / 1e5;
        assert!((noise - 1.0).abs() < 0.02, "{noise}");
    }

    #[test]
    fn equalize_divides_by_coefficient() {
        let x = power_normalize(&random_block(2, 4, 9)).unwrap();
        let h = Complex64::new(0.0, 2.0);
        let n = random_block(2, 4, 10);
        let y = SymbolBlock::new(
            2,
            4,
            x.symbols()
                .iter()
                .zip(n.symbols())
                .map(|(&a, &b)| h * a + b)
                .collect(),
        )
        .unwrap();
        let e = equalize(&y, h).unwrap();
        for ((a, b), r) in x.symbols().iter().zip(n.symbols()).zip(e.symbols()) {
            let expect = a + b / h;
            assert!((r - expect).norm() < 1e-12);
        }
        assert!(matches!(
            equalize(&y, Complex64::new(0.0, 0.0)),
            Err(Error::ZeroChannel)
        ));
        assert_eq!(equalize(&x, Complex64::new(1.0, 0.0)).unwrap(), x);
    }

    #[test]
    fn rayleigh_coefficient_is_constant_per_block_and_recoverable() {
        let x = power_normalize(&random_block(3, 5, 4)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 300.0, 1).unwrap();
        let (y, h) = transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let eq = equalize(&y, h).unwrap();
        for (a, b) in x.symbols().iter().zip(eq.symbols()) {
            assert!((a - b).norm() < 1e-6 / h.norm());
        }
    }

    #[test]
    fn rayleigh_gain_has_unit_mean_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = power_normalize(&random_block(1, 1, 13)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 20.0, 0).unwrap();
        let n = 20000;
        let mean: f64 = (0..n)
            .map(|_| transmit(&x, &cfg, &mut rng).unwrap().1.norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    proptest! {
        #[test]
        fn normalized_power_is_one(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
            let y = power_normalize(&random_block(rows, cols, seed)).unwrap();
            prop_assert!((y.mean_power() - 1.0).abs() < 1e-6);
            let again = power_normalize(&y).unwrap();
            for (a, b) in y.symbols().iter().zip(again.symbols()) {
                prop_assert!((a - b).norm() < 1e-6);
            }
        }

        #[test]
        fn same_seed_same_output(seed in 0u64..1000, snr in -10.0f64..20.0) {
            let x = power_normalize(&random_block(2, 3, seed)).unwrap();
            let before = x.clone();
            let cfg = ChannelConfig::new(ChannelKind::Rayleigh, snr, seed).unwrap();
            let a = transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = transmit(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&x, &before);
        }
    }
}
