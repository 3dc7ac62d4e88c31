use crate::error::{Error, Result};

/// Orthonormal two-channel filter bank. `highpass[k] = (-1)^k lowpass[L-1-k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilter {
    name: String,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
}

const DB2: [f64; 4] = [0.48296291314469025, 0.836516303737469, 0.22414386804185735, -0.12940952255092145];

const DB3: [f64; 6] = [
    0.3326705529509569,
    0.8068915093133388,
    0.4598775021193313,
    -0.13501102001039084,
    -0.08544127388224149,
    0.035226291882100656,
];

const DB4: [f64; 8] = [
    0.23037781330885523,
    0.7148465705525415,
    0.6308807679295904,
    -0.02798376941698385,
    -0.18703481171888114,
    0.030841381835986965,
    0.032883011666982945,
    -0.010597401784997278,
];

impl WaveletFilter {
    pub fn from_lowpass(name: impl Into<String>, lowpass: Vec<f64>) -> Result<Self> {
        if lowpass.len() < 2 || lowpass.len() % 2 != 0 {
            return Err(Error::InvalidArgument("lowpass filter needs an even number of taps".into()));
        }
        let len = lowpass.len();
        let highpass = (0..len)
            .map(|k| if k % 2 == 0 { lowpass[len - 1 - k] } else { -lowpass[len - 1 - k] })
            .collect();
        Ok(Self { name: name.into(), lowpass, highpass })
    }

    pub fn haar() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        Self::from_lowpass("haar", vec![c, c]).unwrap()
    }

    /// Daubechies filter with `order` vanishing moments (`2·order` taps).
    pub fn daubechies(order: usize) -> Result<Self> {
        let taps: &[f64] = match order {
            1 => return Ok(Self::haar()),
            2 => &DB2,
            3 => &DB3,
            4 => &DB4,
            _ => return Err(Error::InvalidArgument(format!("db{order} is not available (db1-db4)"))),
        };
        Self::from_lowpass(format!("db{order}"), taps.to_vec())
    }

    /// Accepts `haar`, `db1` .. `db4`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" => Ok(Self::haar()),
            _ => match name.strip_prefix("db").and_then(|o| o.parse().ok()) {
                Some(order) => Self::daubechies(order),
                None => Err(Error::InvalidArgument(format!("unknown wavelet `{name}`"))),
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    pub fn len(&self) -> usize {
        self.lowpass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lowpass.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_orthonormal() {
        for name in ["haar", "db2", "db3", "db4"] {
            let f = WaveletFilter::by_name(name).unwrap();
            let h = f.lowpass();
            let energy: f64 = h.iter().map(|v| v * v).sum();
            assert!((energy - 1.0).abs() < 1e-10, "{name}: {energy}");
            let dc: f64 = h.iter().sum();
            assert!((dc - std::f64::consts::SQRT_2).abs() < 1e-10, "{name}");
            // double-shift orthogonality
            for shift in (2..h.len()).step_by(2) {
                let dot: f64 = (0..h.len() - shift).map(|k| h[k] * h[k + shift]).sum();
                assert!(dot.abs() < 1e-10, "{name} shift {shift}: {dot}");
            }
            let g = f.highpass();
            assert!(g.iter().sum::<f64>().abs() < 1e-10);
            let cross: f64 = h.iter().zip(g).map(|(a, b)| a * b).sum();
            assert!(cross.abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(WaveletFilter::by_name("db9").is_err());
        assert!(WaveletFilter::by_name("sym4").is_err());
        assert_eq!(WaveletFilter::by_name("db1").unwrap().name(), "haar");
    }
}
