//! Log-spectral distance, anti-wrapping phase distances, band-wise variants and
//! evaluation reports. All metrics use a 2048-point Hann STFT with hop 512 by default.

pub mod bench;

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::spectral::{amp_phase, anti_wrap, diff_freq, diff_time, stft, Grid, StftConfig, LOG_AMP_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub stft: StftConfig,
    /// Half-open `[low, high)` bands in Hz; a band ending at Nyquist includes it.
    pub bands: Vec<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::eval(),
            bands: vec![(4000.0, 8000.0), (8000.0, 12000.0), (12000.0, 24000.0)],
        }
    }
}

impl EvalConfig {
    /// SHA-256 of the JSON form, lowercase hex; stamped on every report row.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self).map_err(|e| Error::Other(e.to_string()))?;
        Ok(crate::train::hex(&sha2::Sha256::digest(text.as_bytes())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Lsd,
    Ip,
    Gd,
    Iaf,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Lsd, Metric::Ip, Metric::Gd, Metric::Iaf];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Lsd => "lsd",
            Metric::Ip => "awpd_ip",
            Metric::Gd => "awpd_gd",
            Metric::Iaf => "awpd_iaf",
        }
    }
}

/// Per-frame residual grids for a reference/estimate pair.
struct Residuals {
    lsd: Grid,
    ip: Grid,
    gd: Grid,
    iaf: Grid,
    sample_rate: u32,
    config: StftConfig,
}

impl Residuals {
    fn new(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig) -> Result<Self> {
        if reference.sample_rate != estimate.sample_rate {
            return Err(Error::SampleRate {
                expected: reference.sample_rate,
                found: estimate.sample_rate,
                path: None,
            });
        }
        let est = estimate.fit_to(reference.len());
        let (ra, rp) = amp_phase(&stft(reference, &cfg.stft)?);
        let (ea, ep) = amp_phase(&stft(&est, &cfg.stft)?);
        let log10 = |a: f64| a.max(LOG_AMP_FLOOR).log10();
        let aw = |a: &Grid, b: &Grid| a.zip_map(b, |x, y| anti_wrap(x - y));
        Ok(Self {
            lsd: ra.values.zip_map(&ea.values, |x, y| log10(x) - log10(y))?,
            ip: aw(&rp.values, &ep.values)?,
            gd: aw(&diff_freq(&rp.values), &diff_freq(&ep.values))?,
            iaf: aw(&diff_time(&rp.values), &diff_time(&ep.values))?,
            sample_rate: reference.sample_rate,
            config: cfg.stft,
        })
    }

    fn grid(&self, m: Metric) -> &Grid {
        match m {
            Metric::Lsd => &self.lsd,
            Metric::Ip => &self.ip,
            Metric::Gd => &self.gd,
            Metric::Iaf => &self.iaf,
        }
    }

    fn band_bins(&self, low: f64, high: f64) -> Result<std::ops::Range<usize>> {
        band_bins(&self.config, self.sample_rate, low, high)
    }

    /// Per-frame mean of squared residuals over `bins`.
    fn frame_ms(&self, m: Metric, bins: std::ops::Range<usize>) -> Vec<f64> {
        let g = self.grid(m);
        let n = bins.len() as f64;
        (0..g.rows())
            .map(|t| bins.clone().map(|k| g.get(t, k).powi(2)).sum::<f64>() / n)
            .collect()
    }
}

/// Bins whose centre frequency lies in `[low, high)`, or `[low, Nyquist]` when
/// `high` is at or above Nyquist.
pub fn band_bins(cfg: &StftConfig, sample_rate: u32, low: f64, high: f64) -> Result<std::ops::Range<usize>> {
    let nyquist = sample_rate as f64 / 2.0;
    let inside = |k: usize| {
        let f = cfg.bin_frequency(k, sample_rate);
        f >= low && (f < high || (high >= nyquist && f <= nyquist))
    };
    let bins: Vec<usize> = (0..cfg.n_bins()).filter(|&k| inside(k)).collect();
    match (bins.first(), bins.last()) {
        (Some(&a), Some(&b)) if low < high => Ok(a..b + 1),
        _ => Err(Error::InvalidArgument(format!(
            "band {low}-{high} Hz contains no bins at {sample_rate} Hz"
        ))),
    }
}

fn mean_sqrt(ms: &[f64]) -> f64 {
    ms.iter().map(|v| v.sqrt()).sum::<f64>() / ms.len() as f64
}

pub fn lsd(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig) -> Result<f64> {
    let r = Residuals::new(reference, estimate, cfg)?;
    Ok(mean_sqrt(&r.frame_ms(Metric::Lsd, 0..cfg.stft.n_bins())))
}

/// `kind` is one of the phase metrics ([`Metric::Ip`], [`Metric::Gd`], [`Metric::Iaf`]).
pub fn awpd(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig, kind: Metric) -> Result<f64> {
    if kind == Metric::Lsd {
        return Err(Error::InvalidArgument("awpd kind must be a phase metric".into()));
    }
    let r = Residuals::new(reference, estimate, cfg)?;
    Ok(mean_sqrt(&r.frame_ms(kind, 0..cfg.stft.n_bins())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub lsd: f64,
    pub awpd_ip: f64,
    pub awpd_gd: f64,
    pub awpd_iaf: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Lsd => self.lsd,
            Metric::Ip => self.awpd_ip,
            Metric::Gd => self.awpd_gd,
            Metric::Iaf => self.awpd_iaf,
        }
    }
}

/// Per-frame mean squares of one metric in one band, with the band's bin count.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFrames {
    pub bins: usize,
    pub frame_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMetrics {
    pub low: f64,
    pub high: f64,
    pub values: MetricValues,
    /// Indexed like [`Metric::ALL`].
    pub frames: [BandFrames; 4],
}

pub fn all_metrics(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig) -> Result<MetricValues> {
    let r = Residuals::new(reference, estimate, cfg)?;
    let all = 0..cfg.stft.n_bins();
    let v = |m| mean_sqrt(&r.frame_ms(m, all.clone()));
    Ok(MetricValues {
        lsd: v(Metric::Lsd),
        awpd_ip: v(Metric::Ip),
        awpd_gd: v(Metric::Gd),
        awpd_iaf: v(Metric::Iaf),
    })
}

/// Metrics restricted to each configured band. Phase differentials are taken on
/// the full grid before restriction.
pub fn bandwise(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig) -> Result<Vec<BandMetrics>> {
    let r = Residuals::new(reference, estimate, cfg)?;
    cfg.bands
        .iter()
        .map(|&(low, high)| {
            let bins = r.band_bins(low, high)?;
            let frames = Metric::ALL.map(|m| BandFrames {
                bins: bins.len(),
                frame_ms: r.frame_ms(m, bins.clone()),
            });
            let v = |i: usize| mean_sqrt(&frames[i].frame_ms);
            Ok(BandMetrics {
                low,
                high,
                values: MetricValues {
                    lsd: v(0),
                    awpd_ip: v(1),
                    awpd_gd: v(2),
                    awpd_iaf: v(3),
                },
                frames,
            })
        })
        .collect()
}

/// Full-band value from band parts covering every bin exactly once:
/// `mean_t sqrt(Σ_b n_b · ms_{b,t} / Σ_b n_b)`.
pub fn recombine(parts: &[&BandFrames]) -> Result<f64> {
    let frames = parts.first().map(|p| p.frame_ms.len()).unwrap_or(0);
    if frames == 0 || parts.iter().any(|p| p.frame_ms.len() != frames) {
        return Err(Error::InvalidArgument("band parts must share a non-zero frame count".into()));
    }
    let total: usize = parts.iter().map(|p| p.bins).sum();
    let ms: Vec<f64> = (0..frames)
        .map(|t| parts.iter().map(|p| p.bins as f64 * p.frame_ms[t]).sum::<f64>() / total as f64)
        .collect();
    Ok(mean_sqrt(&ms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub low: f64,
    pub high: f64,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    pub values: MetricValues,
    pub bands: Vec<BandRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub utterances: Vec<UtteranceRow>,
    pub mean: MetricValues,
    pub band_means: Vec<BandRow>,
    pub rtf: Option<f64>,
    pub flops: Option<f64>,
}

impl EvalReport {
    /// Builds a report; corpus means are arithmetic means over utterances.
    pub fn new(config_hash: String, utterances: Vec<UtteranceRow>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::InvalidArgument("no utterances to report".into()));
        }
        let n = utterances.len() as f64;
        let mean_of = |f: &dyn Fn(&UtteranceRow) -> &MetricValues| MetricValues {
            lsd: utterances.iter().map(|u| f(u).lsd).sum::<f64>() / n,
            awpd_ip: utterances.iter().map(|u| f(u).awpd_ip).sum::<f64>() / n,
            awpd_gd: utterances.iter().map(|u| f(u).awpd_gd).sum::<f64>() / n,
            awpd_iaf: utterances.iter().map(|u| f(u).awpd_iaf).sum::<f64>() / n,
        };
        let mean = mean_of(&|u| &u.values);
        let n_bands = utterances[0].bands.len();
        if utterances.iter().any(|u| u.bands.len() != n_bands) {
            return Err(Error::InvalidArgument("utterances report different band sets".into()));
        }
        let band_means = (0..n_bands)
            .map(|b| BandRow {
                low: utterances[0].bands[b].low,
                high: utterances[0].bands[b].high,
                values: mean_of(&|u| &u.bands[b].values),
            })
            .collect();
        Ok(Self {
            config_hash,
            utterances,
            mean,
            band_means,
            rtf: None,
            flops: None,
        })
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["id", "lsd", "awpd_ip", "awpd_gd", "awpd_iaf"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for b in &self.band_means {
            for m in Metric::ALL {
                h.push(format!("{}_{}_{}", m.name(), b.low, b.high));
            }
        }
        h.push("config_hash".into());
        h
    }

    fn row(&self, id: &str, values: &MetricValues, bands: &[BandRow]) -> Vec<String> {
        let mut r = vec![id.to_string()];
        r.extend(Metric::ALL.iter().map(|&m| values.get(m).to_string()));
        for b in bands {
            r.extend(Metric::ALL.iter().map(|&m| b.values.get(m).to_string()));
        }
        r.push(self.config_hash.clone());
        r
    }

    /// One row per utterance followed by a `mean` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Other(format!("csv: {e}"));
        w.write_record(self.header()).map_err(io)?;
        for u in &self.utterances {
            w.write_record(self.row(&u.id, &u.values, &u.bands)).map_err(io)?;
        }
        w.write_record(self.row("mean", &self.mean, &self.band_means)).map_err(io)?;
        w.flush().map_err(|e| Error::Other(format!("csv: {e}")))
    }

    /// One JSON object per utterance and a final summary object, same field order as the CSV.
    pub fn write_ndjson(&self, mut out: impl Write) -> Result<()> {
        let header = self.header();
        let mut emit = |row: Vec<String>| -> Result<()> {
            let mut obj = serde_json::Map::new();
            for (k, v) in header.iter().zip(row) {
                let value = v
                    .parse::<f64>()
                    .ok()
                    .filter(|_| k != "id" && k != "config_hash")
                    .and_then(serde_json::Number::from_f64)
                    .map(serde_json::Value::Number)
                    .unwrap_or(serde_json::Value::String(v));
                obj.insert(k.clone(), value);
            }
            writeln!(out, "{}", serde_json::Value::Object(obj)).map_err(|e| Error::Other(e.to_string()))
        };
        for u in &self.utterances {
            emit(self.row(&u.id, &u.values, &u.bands))?;
        }
        emit(self.row("mean", &self.mean, &self.band_means))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(len: usize, sr: u32, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), sr).unwrap()
    }

    #[test]
    fn identical_signals_score_zero() {
        let x = noise(8000, 16000, 1);
        let cfg = EvalConfig::default();
        let v = all_metrics(&x, &x, &cfg).unwrap();
        assert_eq!((v.lsd, v.awpd_ip, v.awpd_gd, v.awpd_iaf), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn tenfold_amplitude_gives_unit_lsd() {
        let x = noise(8000, 16000, 2);
        let y = Waveform::new(x.samples.iter().map(|v| v * 10.0).collect(), 16000).unwrap();
        let l = lsd(&x, &y, &EvalConfig::default()).unwrap();
        assert!((l - 1.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let (x, y) = (noise(6000, 16000, 3), noise(6000, 16000, 4));
        let cfg = EvalConfig::default();
        assert!((lsd(&x, &y, &cfg).unwrap() - lsd(&y, &x, &cfg).unwrap()).abs() < 1e-12);
        let (a, b) = (awpd(&x, &y, &cfg, Metric::Ip).unwrap(), awpd(&y, &x, &cfg, Metric::Ip).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rate_mismatch_and_bad_band() {
        let cfg = EvalConfig::default();
        assert!(lsd(&noise(4000, 16000, 1), &noise(4000, 8000, 1), &cfg).is_err());
        assert!(band_bins(&cfg.stft, 16000, 12000.0, 24000.0).is_err());
        assert_eq!(band_bins(&cfg.stft, 16000, 0.0, 8000.0).unwrap(), 0..1025);
    }

    #[test]
    fn bands_recombine_to_full_band() {
        let (x, y) = (noise(8000, 16000, 5), noise(8000, 16000, 6));
        let cfg = EvalConfig {
            bands: vec![(0.0, 2500.0), (2500.0, 4000.0), (4000.0, 8000.0)],
            ..EvalConfig::default()
        };
        let bands = bandwise(&x, &y, &cfg).unwrap();
        let full = all_metrics(&x, &y, &cfg).unwrap();
        for (i, m) in Metric::ALL.iter().enumerate() {
            let parts: Vec<&BandFrames> = bands.iter().map(|b| &b.frames[i]).collect();
            assert!((recombine(&parts).unwrap() - full.get(*m)).abs() < 1e-9);
        }
        let single = EvalConfig {
            bands: vec![(0.0, 8000.0)],
            ..EvalConfig::default()
        };
        assert_eq!(bandwise(&x, &y, &single).unwrap()[0].values, full);
    }

    #[test]
    fn report_formats_share_field_order() {
        let row = |id: &str, v: f64| UtteranceRow {
            id: id.into(),
            values: MetricValues {
                lsd: v,
                awpd_ip: v,
                awpd_gd: v,
                awpd_iaf: v,
            },
            bands: vec![],
        };
        let r = EvalReport::new("abc".into(), vec![row("a", 1.0), row("b", 3.0)]).unwrap();
        assert_eq!(r.mean.lsd, 2.0);
        let mut csv_out = Vec::new();
        r.write_csv(&mut csv_out).unwrap();
        let csv_text = String::from_utf8(csv_out).unwrap();
        assert!(csv_text.starts_with("id,lsd,awpd_ip,awpd_gd,awpd_iaf,config_hash\n"));
        assert_eq!(csv_text.lines().count(), 4);
        let mut nd = Vec::new();
        r.write_ndjson(&mut nd).unwrap();
        let first = String::from_utf8(nd).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with(r#"{"id":"a","lsd":1.0"#), "{first}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn lsd_and_ip_are_symmetric(a in 0u64..500, b in 0u64..500) {
            let cfg = EvalConfig::default();
            let (x, y) = (noise(6000, 16000, a), noise(6000, 16000, b + 1000));
            let d = lsd(&x, &y, &cfg).unwrap();
            proptest::prop_assert!(d >= 0.0);
            proptest::prop_assert!((d - lsd(&y, &x, &cfg).unwrap()).abs() < 1e-12);
            let ip = awpd(&x, &y, &cfg, Metric::Ip).unwrap();
            proptest::prop_assert!((ip - awpd(&y, &x, &cfg, Metric::Ip).unwrap()).abs() < 1e-12);
        }
    }
}
