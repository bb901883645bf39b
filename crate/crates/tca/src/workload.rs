//! Synthetic attention workloads and the binary tensor file format.
//!
//! The generators build Q/K/V triples whose full causal attention exhibits
//! one of five qualitative score distributions: uniform, bipolar, terminal
//! bias, attention sink, or sparse activation. Patterns are shaped in key
//! space (structured K, random Q); directly prescribing the score matrix
//! would be overdetermined.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionInputs;
use crate::error::{Result, TcaError};
use crate::tensor::{fill_random, next_gaussian, rng_for, Distribution, Seed, Tensor2D};

/// The five score-distribution families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternFamily {
    Uniform,
    Bipolar,
    TerminalBias,
    AttentionSink,
    SparseActivation,
}

impl std::str::FromStr for PatternFamily {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PatternFamily::Uniform),
            "bipolar" => Ok(PatternFamily::Bipolar),
            "terminal-bias" | "terminal_bias" => Ok(PatternFamily::TerminalBias),
            "sink" | "attention-sink" | "attention_sink" => Ok(PatternFamily::AttentionSink),
            "sparse" | "sparse-activation" | "sparse_activation" => {
                Ok(PatternFamily::SparseActivation)
            }
            other => Err(TcaError::invalid(
                "family",
                format!(
                    "unknown family `{other}`; expected uniform, bipolar, terminal-bias, \
                     attention-sink, or sparse-activation"
                ),
            )),
        }
    }
}

impl std::fmt::Display for PatternFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PatternFamily::Uniform => "uniform",
            PatternFamily::Bipolar => "bipolar",
            PatternFamily::TerminalBias => "terminal-bias",
            PatternFamily::AttentionSink => "attention-sink",
            PatternFamily::SparseActivation => "sparse-activation",
        };
        f.write_str(name)
    }
}

/// Recipe for one synthetic workload.
#[derive(Debug, Clone, Copy)]
pub struct PatternSpec {
    pub family: PatternFamily,
    pub len: usize,
    pub head_dim: usize,
    pub seed: Seed,
    /// How strongly the family's template dominates the noise floor, in
    /// (0, 1]. Noise is Gaussian scaled by `1 - intensity`.
    pub intensity: f64,
}

impl PatternSpec {
    pub fn new(
        family: PatternFamily,
        len: usize,
        head_dim: usize,
        seed: Seed,
        intensity: f64,
    ) -> Result<Self> {
        if len < 4 {
            return Err(TcaError::invalid("length", "need at least 4 tokens"));
        }
        if head_dim < 2 {
            return Err(TcaError::invalid("dim", "need head dimension of at least 2"));
        }
        if !(intensity > 0.0 && intensity <= 1.0) {
            return Err(TcaError::invalid(
                "intensity",
                format!("must lie in (0, 1], got {intensity}"),
            ));
        }
        Ok(PatternSpec {
            family,
            len,
            head_dim,
            seed,
            intensity,
        })
    }
}

/// Logit a template column needs so that, against a flat noise floor of L
/// competitors, it holds roughly `intensity` of the softmax mass.
fn template_logit(len: usize, intensity: f64) -> f64 {
    let hold = intensity.min(0.999);
    (len as f64 * hold / (1.0 - hold)).ln()
}

/// Draws `count` distinct indices in `[0, len)`.
fn sample_distinct(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    use rand_core::RngCore;
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count.min(len) {
        let j = i + (rng.next_u64() as usize) % (len - i);
        pool.swap(i, j);
    }
    pool.truncate(count.min(len));
    pool.sort_unstable();
    pool
}

/// Deterministic synthetic Q/K/V for the requested family.
///
/// All families share a carrier direction u. Structured families project
/// the random queries off u and add a fixed positive carrier component, so
/// template keys aligned with u receive the same boost from every query.
pub fn generate_pattern(spec: &PatternSpec) -> Result<AttentionInputs> {
    let PatternSpec {
        family,
        len,
        head_dim: dim,
        seed,
        intensity,
    } = *spec;
    let mut rng = rng_for(seed);
    let q_raw = fill_random(&mut rng, len * dim, Distribution::Gaussian);
    let v_raw = fill_random(&mut rng, len * dim, Distribution::Gaussian);
    let noise_std = 1.0 - intensity;
    let mut k_raw: Vec<f64> = fill_random(&mut rng, len * dim, Distribution::Gaussian)
        .into_iter()
        .map(|x| x * noise_std)
        .collect();

    let carrier = 1.0 / (dim as f64).sqrt(); // unit vector (1,...,1)/sqrt(d)
    let sd = (dim as f64).sqrt();
    // add `logit * sd * u` to key row j: every carrier-bearing query then
    // scores `logit` on that key after the 1/sqrt(d) attention scaling
    let boost = |k: &mut [f64], row: usize, logit: f64| {
        for c in 0..dim {
            k[row * dim + c] += logit * sd * carrier;
        }
    };

    let structured = !matches!(family, PatternFamily::Uniform);
    match family {
        PatternFamily::Uniform => {}
        PatternFamily::AttentionSink => {
            boost(&mut k_raw, 0, template_logit(len, intensity));
        }
        PatternFamily::TerminalBias => {
            let beta = intensity * (len - 1) as f64 / 32.0;
            for j in 0..len {
                let ramp = j as f64 / (len - 1) as f64;
                boost(&mut k_raw, j, beta * ramp);
            }
        }
        PatternFamily::Bipolar => {
            let sink = 0.9 * template_logit(len, intensity);
            let beta = intensity * (len - 1) as f64 / 32.0;
            for j in 1..len {
                let ramp = j as f64 / (len - 1) as f64;
                boost(&mut k_raw, j, beta * ramp);
            }
            boost(&mut k_raw, 0, sink);
        }
        PatternFamily::SparseActivation => {
            let count = (len / 64).max(2);
            let spikes = sample_distinct(&mut rng, len, count);
            let logit = template_logit(len, intensity) - (count as f64).ln();
            for j in spikes {
                boost(&mut k_raw, j, logit);
            }
        }
    }

    let q_data: Vec<f64> = if structured {
        // remove the carrier component of each query, then pin it at 1
        let mut out = q_raw;
        for i in 0..len {
            let row = &mut out[i * dim..(i + 1) * dim];
            let proj: f64 = row.iter().map(|x| x * carrier).sum();
            for x in row.iter_mut() {
                *x += (1.0 - proj) * carrier;
            }
        }
        out
    } else {
        q_raw
    };

    let q = Tensor2D::new(len, dim, q_data)?;
    let k = Tensor2D::new(len, dim, k_raw)?;
    let v = Tensor2D::new(len, dim, v_raw)?;
    AttentionInputs::new(q, k, v)
}

// --- binary tensor files -------------------------------------------------

pub const TENSOR_MAGIC: [u8; 4] = *b"TCAT";
pub const TENSOR_FORMAT_VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 31;

/// Atomic file write: temp file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))
        .map_err(|e| TcaError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| TcaError::io(path, e))?;
    tmp.flush().map_err(|e| TcaError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| TcaError::io(path, e.error))?;
    Ok(())
}

/// Writes a tensor as magic, version, rank, dims, then row-major f32
/// little-endian payload. The write is atomic.
pub fn write_tensor(path: &Path, t: &Tensor2D) -> Result<()> {
    let mut bytes =
        Vec::with_capacity(4 + 4 + 4 + 16 + t.data().len() * 4);
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &x in t.data() {
        let f = x as f32;
        if !f.is_finite() {
            return Err(TcaError::NonFinite { op: "write_tensor" });
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    expected_total: u64,
    read_so_far: &mut u64,
) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader
            .read(&mut buf[filled..])
            .map_err(|e| TcaError::io(path, e))?;
        if n == 0 {
            return Err(TcaError::TruncatedPayload {
                path: path.to_path_buf(),
                expected: expected_total,
                got: *read_so_far + filled as u64,
            });
        }
        filled += n;
    }
    *read_so_far += filled as u64;
    Ok(())
}

/// Reads a tensor file written by [`write_tensor`]. Bad magic, an
/// unsupported version, a non-rank-2 header, oversized dims, and a payload
/// length mismatch each produce their own error.
pub fn read_tensor(path: &Path) -> Result<Tensor2D> {
    let file = std::fs::File::open(path).map_err(|e| TcaError::io(path, e))?;
    let total = file
        .metadata()
        .map_err(|e| TcaError::io(path, e))?
        .len();
    let mut reader = std::io::BufReader::new(file);
    let mut read_so_far = 0u64;

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut magic, path, total.max(28), &mut read_so_far)?;
    if magic != TENSOR_MAGIC {
        return Err(TcaError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut word = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut word, path, total.max(28), &mut read_so_far)?;
    let version = u32::from_le_bytes(word);
    if version != TENSOR_FORMAT_VERSION {
        return Err(TcaError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: TENSOR_FORMAT_VERSION,
        });
    }
    read_exact_or_truncated(&mut reader, &mut word, path, total.max(28), &mut read_so_far)?;
    let rank = u32::from_le_bytes(word);
    if rank != 2 {
        return Err(TcaError::UnsupportedRank {
            path: path.to_path_buf(),
            rank,
        });
    }
    let mut dims = [0u64; 2];
    for d in dims.iter_mut() {
        let mut qword = [0u8; 8];
        read_exact_or_truncated(&mut reader, &mut qword, path, total.max(28), &mut read_so_far)?;
        *d = u64::from_le_bytes(qword);
    }
    let elements = dims[0]
        .checked_mul(dims[1])
        .filter(|&n| n > 0 && n <= MAX_ELEMENTS)
        .ok_or_else(|| TcaError::DimOverflow {
            path: path.to_path_buf(),
            dims: dims.to_vec(),
        })?;

    let expected_total = read_so_far + elements * 4;
    if total != expected_total {
        return Err(TcaError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: expected_total,
            got: total,
        });
    }
    let mut payload = vec![0u8; (elements * 4) as usize];
    read_exact_or_truncated(&mut reader, &mut payload, path, expected_total, &mut read_so_far)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !data.iter().all(|x| x.is_finite()) {
        return Err(TcaError::NonFinite { op: "read_tensor" });
    }
    Tensor2D::new(dims[0] as usize, dims[1] as usize, data)
}

/// Convenience: the three file paths for a Q/K/V prefix.
pub fn qkv_paths(prefix: &str) -> [std::path::PathBuf; 3] {
    [
        format!("{prefix}.q.tcat").into(),
        format!("{prefix}.k.tcat").into(),
        format!("{prefix}.v.tcat").into(),
    ]
}

/// Reads a Q/K/V triple written by the `gen` command.
pub fn read_qkv(prefix: &str) -> Result<AttentionInputs> {
    let [qp, kp, vp] = qkv_paths(prefix);
    AttentionInputs::new(read_tensor(&qp)?, read_tensor(&kp)?, read_tensor(&vp)?)
}

/// Writes a Q/K/V triple for `prefix`.
pub fn write_qkv(prefix: &str, inp: &AttentionInputs) -> Result<()> {
    let [qp, kp, vp] = qkv_paths(prefix);
    write_tensor(&qp, inp.q())?;
    write_tensor(&kp, inp.k())?;
    write_tensor(&vp, inp.v())
}

/// One generated value used while decoding: a fresh query/key/value triple
/// for the next position, drawn from the per-head stream.
pub(crate) fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| next_gaussian(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_attention_scores;

    fn mean_col0(inp: &AttentionInputs, min_visible: usize) -> f64 {
        let a = full_attention_scores(inp, true).unwrap();
        let rows: Vec<usize> = (min_visible - 1..inp.len()).collect();
        rows.iter().map(|&i| a.get(i, 0)).sum::<f64>() / rows.len() as f64
    }

    #[test]
    fn generators_are_deterministic() {
        for family in [
            PatternFamily::Uniform,
            PatternFamily::Bipolar,
            PatternFamily::TerminalBias,
            PatternFamily::AttentionSink,
            PatternFamily::SparseActivation,
        ] {
            let spec = PatternSpec::new(family, 64, 8, Seed(7), 0.9).unwrap();
            let a = generate_pattern(&spec).unwrap();
            let b = generate_pattern(&spec).unwrap();
            assert_eq!(a.q().data(), b.q().data());
            assert_eq!(a.k().data(), b.k().data());
            assert_eq!(a.v().data(), b.v().data());
        }
    }

    #[test]
    fn uniform_rows_stay_near_flat() {
        let spec = PatternSpec::new(PatternFamily::Uniform, 512, 8, Seed(3), 0.9).unwrap();
        let inp = generate_pattern(&spec).unwrap();
        let a = full_attention_scores(&inp, true).unwrap();
        // average of (row max * visible count) stays close to 1 for flat rows
        let mut acc = 0.0;
        for i in 0..512 {
            let row_max = a.row(i)[..=i].iter().cloned().fold(0.0, f64::max);
            acc += row_max * (i + 1) as f64;
        }
        assert!(acc / 512.0 <= 3.0, "mean scaled row max {}", acc / 512.0);
    }

    #[test]
    fn sink_concentrates_on_column_zero() {
        let spec = PatternSpec::new(PatternFamily::AttentionSink, 512, 8, Seed(3), 0.9).unwrap();
        let inp = generate_pattern(&spec).unwrap();
        assert!(mean_col0(&inp, 8) >= 0.5);
    }

    #[test]
    fn noiseless_sink_column_zero_is_maximal() {
        let spec = PatternSpec::new(PatternFamily::AttentionSink, 4, 4, Seed(0), 1.0).unwrap();
        let inp = generate_pattern(&spec).unwrap();
        let a = full_attention_scores(&inp, true).unwrap();
        for i in 0..4 {
            let row_max = a.row(i)[..=i].iter().cloned().fold(0.0, f64::max);
            assert_eq!(a.get(i, 0), row_max, "row {i}");
        }
    }

    #[test]
    fn sink_and_uniform_families_separate() {
        let sink = generate_pattern(
            &PatternSpec::new(PatternFamily::AttentionSink, 512, 8, Seed(5), 0.9).unwrap(),
        )
        .unwrap();
        let uniform = generate_pattern(
            &PatternSpec::new(PatternFamily::Uniform, 512, 8, Seed(5), 0.9).unwrap(),
        )
        .unwrap();
        let s = mean_col0(&sink, 1);
        let u = mean_col0(&uniform, 1);
        assert!(s >= 10.0 * u, "sink {s} vs uniform {u}");
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tcat");
        let eye = Tensor2D::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        write_tensor(&path, &eye).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), eye);

        // odd shape with values that survive f32 quantization
        let t = crate::tensor::random_tensor(257, 31, Seed(11), Distribution::Uniform).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn corrupted_files_yield_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tcat");
        let t = Tensor2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(read_tensor(&path), Err(TcaError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TcaError::UnsupportedVersion { found: 9, .. })
        ));

        let truncated = &good[..good.len() - 5];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TcaError::TruncatedPayload { .. })
        ));

        let mut bad_rank = good.clone();
        bad_rank[8] = 3;
        std::fs::write(&path, &bad_rank).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TcaError::UnsupportedRank { rank: 3, .. })
        ));

        let mut bad_dims = good.clone();
        bad_dims[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bad_dims).unwrap();
        assert!(matches!(read_tensor(&path), Err(TcaError::DimOverflow { .. })));
    }
}
