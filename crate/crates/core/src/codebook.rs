//! Bandwidth-request code bank: an `L x K` matrix of BPSK chips.
//!
//! Each column is one code of length `L` (one chip per reserved subcarrier).
//! Codes are pseudo-random ±1 sequences drawn from a seeded ChaCha20 stream;
//! any column that duplicates an earlier one is redrawn so that all `K` codes
//! are distinct.
//!
//! The text format is a header line `L K` followed by `L` lines of `K`
//! space-separated entries. Code matrices use `+1`/`-1`; decoder matrices reuse
//! the same layout with real entries (see [`write_real_matrix`]).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{param_err, read_file, MudError, Result};
use crate::seed::rng_from_seed;

/// The code bank `C`. Entries are stored as `f64` (exactly ±1) because every
/// consumer does floating point linear algebra with it.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    matrix: DMatrix<f64>,
}

impl CodeMatrix {
    /// Wraps a matrix after checking the ±1 and `L < K` invariants.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let (l, k) = matrix.shape();
        check_dims(l, k)?;
        for col in 0..k {
            for row in 0..l {
                let v = matrix[(row, col)];
                if v != 1.0 && v != -1.0 {
                    return Err(MudError::Parse {
                        row: row + 1,
                        col: col + 1,
                        reason: format!("entry {v} is not +1 or -1"),
                    });
                }
            }
        }
        Ok(Self { matrix })
    }

    /// Builds from row-major ±1 rows, without the `L < K` check. Only meant
    /// for small hand-written examples (e.g. square orthogonal toys).
    pub fn from_rows_unchecked(rows: &[&[f64]]) -> Self {
        let l = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        Self {
            matrix: DMatrix::from_fn(l, k, |i, j| rows[i][j]),
        }
    }

    /// Number of subcarriers `L`.
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of codes `K`.
    pub fn num_codes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Entry `C_{l,j}` (0-based).
    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.matrix[(l, j)]
    }

    /// Column view `C_j`.
    pub fn code(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.matrix.column(j)
    }

    /// `Ĉ(ℓ)`: every column except `ℓ`.
    pub fn without_code(&self, ell: usize) -> DMatrix<f64> {
        self.matrix.clone().remove_column(ell)
    }

    /// Row sums `Σ_j C_j`, the vector that enters the `α` coherence term.
    pub fn row_sums(&self) -> nalgebra::DVector<f64> {
        self.matrix.column_sum()
    }

    fn columns_distinct(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.num_codes());
        self.matrix
            .column_iter()
            .all(|c| seen.insert(c.iter().map(|&v| v > 0.0).collect::<Vec<_>>()))
    }
}

fn check_dims(l: usize, k: usize) -> Result<()> {
    if l == 0 || k == 0 {
        return Err(param_err(
            "L/K",
            format!("dimensions must be positive, got L={l}, K={k}"),
        ));
    }
    if l >= k {
        return Err(param_err(
            "L",
            format!("code bank must be overcomplete (L < K), got L={l}, K={k}"),
        ));
    }
    Ok(())
}

/// Draws an `L x K` bank of distinct ±1 codes, deterministic in `seed`.
pub fn generate_code_matrix(l: usize, k: usize, seed: u64) -> Result<CodeMatrix> {
    check_dims(l, k)?;
    if l < 64 && (k as u128) > (1u128 << l) {
        return Err(param_err(
            "K",
            format!("only 2^{l} distinct codes of length {l} exist, asked for {k}"),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut seen: HashSet<Vec<bool>> = HashSet::with_capacity(k);
    let mut matrix = DMatrix::zeros(l, k);
    for j in 0..k {
        let bits = loop {
            let bits: Vec<bool> = (0..l).map(|_| rng.random::<bool>()).collect();
            if seen.insert(bits.clone()) {
                break bits;
            }
        };
        for (i, b) in bits.into_iter().enumerate() {
            matrix[(i, j)] = if b { 1.0 } else { -1.0 };
        }
    }
    let codes = CodeMatrix { matrix };
    debug_assert!(codes.columns_distinct());
    Ok(codes)
}

/// Structured bank for `L = 2ⁿ`: the `L` Sylvester–Hadamard columns followed by
/// the same columns multiplied chip-wise by the quadratic sequence
/// `(-1)^(x₀x₁ + x₂x₃ + …)` over the bits of the chip index. Codes within each
/// half are orthogonal; across halves `|C_iᵀC_j| ≤ sqrt(L)` for even `n` and
/// `sqrt(2L)` for odd `n`. The first `K` columns are kept, `L < K ≤ 2L`.
pub fn structured_code_matrix(l: usize, k: usize) -> Result<CodeMatrix> {
    check_dims(l, k)?;
    if !l.is_power_of_two() || l < 4 {
        return Err(param_err(
            "L",
            format!("structured bank needs a power of two >= 4, got {l}"),
        ));
    }
    if k > 2 * l {
        return Err(param_err(
            "K",
            format!("structured bank has at most 2L = {} codes, asked for {k}", 2 * l),
        ));
    }
    let n = l.trailing_zeros() as usize;
    let sign = |b: u32| if b % 2 == 0 { 1.0 } else { -1.0 };
    let quadratic = |i: usize| -> u32 {
        (0..n / 2)
            .map(|p| ((i >> (2 * p)) & 1) * ((i >> (2 * p + 1)) & 1))
            .sum::<usize>() as u32
    };
    let matrix = DMatrix::from_fn(l, k, |i, j| {
        let walsh = (i & (j % l)).count_ones();
        if j < l {
            sign(walsh)
        } else {
            sign(walsh + quadratic(i))
        }
    });
    let codes = CodeMatrix { matrix };
    debug_assert!(codes.columns_distinct());
    Ok(codes)
}

/// Serializes the code matrix in the `L K` + `±1` rows text format.
pub fn code_matrix_to_string(codes: &CodeMatrix) -> String {
    let (l, k) = codes.matrix.shape();
    let mut out = String::with_capacity(l * k * 3 + 16);
    let _ = writeln!(out, "{l} {k}");
    for row in codes.matrix.row_iter() {
        let line: Vec<&str> = row.iter().map(|&v| if v > 0.0 { "+1" } else { "-1" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_code_matrix(codes: &CodeMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, code_matrix_to_string(codes))?;
    Ok(())
}

pub fn load_code_matrix(path: impl AsRef<Path>) -> Result<CodeMatrix> {
    parse_code_matrix(&read_file(path.as_ref())?)
}

/// Parses the code-matrix text format. Errors name the 1-based row and column
/// (row numbering counts matrix rows, not the header).
pub fn parse_code_matrix(text: &str) -> Result<CodeMatrix> {
    let matrix = parse_matrix(text, |tok, row, col| match tok {
        "+1" | "1" => Ok(1.0),
        "-1" => Ok(-1.0),
        other => Err(MudError::Parse {
            row,
            col,
            reason: format!("entry `{other}` is not +1 or -1"),
        }),
    })?;
    CodeMatrix::from_matrix(matrix)
}

/// Writes any real matrix in the same layout as code matrices. Entries use the
/// shortest representation that round-trips exactly.
pub fn real_matrix_to_string(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_real_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, real_matrix_to_string(m))?;
    Ok(())
}

pub fn parse_real_matrix(text: &str) -> Result<DMatrix<f64>> {
    parse_matrix(text, |tok, row, col| {
        tok.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| MudError::Parse {
                row,
                col,
                reason: format!("entry `{tok}` is not a finite number"),
            })
    })
}

pub fn read_real_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    parse_real_matrix(&read_file(path.as_ref())?)
}

fn parse_matrix(text: &str, entry: impl Fn(&str, usize, usize) -> Result<f64>) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| MudError::Format("empty file, expected `L K` header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MudError::Format(format!("bad header `{header}`, expected `L K`")))?;
    let [l, k] = dims[..] else {
        return Err(MudError::Format(format!("bad header `{header}`, expected `L K`")));
    };
    let mut matrix = DMatrix::zeros(l, k);
    let mut rows_read = 0;
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if row > l {
            return Err(MudError::Format(format!("more than the declared {l} rows")));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != k {
            return Err(MudError::Ragged {
                row,
                found: toks.len(),
                expected: k,
            });
        }
        for (j, tok) in toks.into_iter().enumerate() {
            matrix[(i, j)] = entry(tok, row, j + 1)?;
        }
        rows_read = row;
    }
    if rows_read != l {
        return Err(MudError::Format(format!("declared {l} rows, found {rows_read}")));
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_bank_cross_correlations() {
        for (l, bound) in [(64usize, 8.0), (128, 16.0)] {
            let c = structured_code_matrix(l, 2 * l).unwrap();
            let g = c.matrix().tr_mul(c.matrix());
            for i in 0..2 * l {
                for j in 0..2 * l {
                    let v = g[(i, j)];
                    if i == j {
                        assert_eq!(v, l as f64);
                    } else if (i < l) == (j < l) {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!(v.abs() <= bound, "({i},{j}) = {v}");
                    }
                }
            }
        }
        assert!(structured_code_matrix(48, 64).is_err());
        assert!(structured_code_matrix(16, 40).is_err());
    }

    #[test]
    fn small_bank_is_pm_one_and_distinct() {
        let c = generate_code_matrix(4, 8, 7).unwrap();
        assert_eq!((c.len(), c.num_codes()), (4, 8));
        assert!(c.matrix().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(c.columns_distinct());
        assert_eq!(c, generate_code_matrix(4, 8, 7).unwrap());
    }

    #[test]
    fn full_scale_dimensions() {
        let c = generate_code_matrix(144, 256, 2024).unwrap();
        assert_eq!(c.matrix().shape(), (144, 256));
        assert!(c.columns_distinct());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(generate_code_matrix(8, 8, 1).is_err());
        assert!(generate_code_matrix(9, 8, 1).is_err());
        assert!(generate_code_matrix(0, 8, 1).is_err());
        assert!(generate_code_matrix(4, 0, 1).is_err());
        // only 8 distinct codes of length 3
        assert!(generate_code_matrix(3, 9, 1).is_err());
        assert!(generate_code_matrix(3, 8, 1).is_ok());
    }

    #[test]
    fn distinct_over_many_seeds() {
        for seed in 0..120 {
            let c = generate_code_matrix(8, 64, seed).unwrap();
            assert!(c.columns_distinct(), "seed {seed}");
        }
    }

    #[test]
    fn text_round_trip() {
        let c = generate_code_matrix(4, 8, 7).unwrap();
        let text = code_matrix_to_string(&c);
        assert!(text.starts_with("4 8\n"));
        assert_eq!(parse_code_matrix(&text).unwrap(), c);
    }

    #[test]
    fn zero_entry_is_reported_with_coordinates() {
        let text = "2 3\n+1 -1 +1\n-1 0 +1\n";
        match parse_code_matrix(text) {
            Err(MudError::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let text = "2 3\n+1 -1 +1\n-1 +1\n";
        assert!(matches!(
            parse_code_matrix(text),
            Err(MudError::Ragged {
                row: 2,
                found: 2,
                expected: 3
            })
        ));
    }

    #[test]
    fn real_matrix_round_trip_is_exact() {
        let m = DMatrix::from_fn(3, 5, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0) - 0.2);
        let back = parse_real_matrix(&real_matrix_to_string(&m)).unwrap();
        assert_eq!(back, m);
    }

    proptest::proptest! {
        #[test]
        fn generated_banks_are_pm_one_and_round_trip(l in 5usize..24, extra in 1usize..24, seed in 0u64..1000) {
            let k = l + extra;
            let codes = generate_code_matrix(l, k, seed).unwrap();
            proptest::prop_assert!(codes.matrix().iter().all(|v| *v == 1.0 || *v == -1.0));
            proptest::prop_assert_eq!(&codes, &generate_code_matrix(l, k, seed).unwrap());
            let back = parse_code_matrix(&code_matrix_to_string(&codes)).unwrap();
            proptest::prop_assert_eq!(back, codes);
        }
    }
}
