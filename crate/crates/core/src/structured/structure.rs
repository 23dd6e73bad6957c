use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sparsity class of a Kronecker factor, independent of its dimension.
///
/// Every class contains the identity and is closed under addition, scaling
/// and matrix multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureKind {
    Dense,
    Diagonal,
    /// Dense square blocks of size `block` along the diagonal; the last
    /// block holds the remainder when `block` does not divide the dimension.
    BlockDiagonal {
        block: usize,
    },
    /// Full lower-triangular.
    Tril,
    /// Full upper-triangular.
    Triu,
    /// Lower-triangular Toeplitz, one value per sub-diagonal band.
    TrilToeplitz,
    /// Upper-triangular Toeplitz, one value per super-diagonal band.
    TriuToeplitz,
    /// `[[A11, A12, A13], [0, D22, 0], [0, A32, A33]]` with `A11` of size
    /// `d2`, `A33` of size `d3` and `D22` diagonal.
    Hierarchical {
        d2: usize,
        d3: usize,
    },
    /// `[[A11, A12], [0, D22]]` with `A11` of size `k` and `D22` diagonal.
    RankKTril {
        k: usize,
    },
    /// `[[A11, 0], [A21, D22]]`, the transpose pattern of [`Self::RankKTril`].
    RankKTriu {
        k: usize,
    },
}

impl StructureKind {
    /// Binds the kind to a dimension, clamping parameters that exceed it.
    pub fn fit(self, dim: usize) -> FactorStructure {
        let kind = match self {
            StructureKind::BlockDiagonal { block } => StructureKind::BlockDiagonal {
                block: block.clamp(1, dim.max(1)),
            },
            StructureKind::RankKTril { k } => StructureKind::RankKTril { k: k.min(dim) },
            StructureKind::RankKTriu { k } => StructureKind::RankKTriu { k: k.min(dim) },
            StructureKind::Hierarchical { d2, d3 } => {
                let d2 = d2.min(dim);
                StructureKind::Hierarchical {
                    d2,
                    d3: d3.min(dim - d2),
                }
            }
            other => other,
        };
        FactorStructure { kind, dim }
    }

    pub fn is_toeplitz(self) -> bool {
        matches!(
            self,
            StructureKind::TrilToeplitz | StructureKind::TriuToeplitz
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Dense => "dense",
            StructureKind::Diagonal => "diagonal",
            StructureKind::BlockDiagonal { .. } => "block_diagonal",
            StructureKind::Tril => "tril",
            StructureKind::Triu => "triu",
            StructureKind::TrilToeplitz => "tril_toeplitz",
            StructureKind::TriuToeplitz => "triu_toeplitz",
            StructureKind::Hierarchical { .. } => "hierarchical",
            StructureKind::RankKTril { .. } => "rank_k_tril",
            StructureKind::RankKTriu { .. } => "rank_k_triu",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StructureKind::BlockDiagonal { block } => write!(f, "block_diagonal(k={block})"),
            StructureKind::Hierarchical { d2, d3 } => write!(f, "hierarchical(d2={d2},d3={d3})"),
            StructureKind::RankKTril { k } => write!(f, "rank_k_tril(k={k})"),
            StructureKind::RankKTriu { k } => write!(f, "rank_k_triu(k={k})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name` or `name(args)`; args are positional integers or
/// `key=value` pairs, e.g. `block_diagonal(4)` or `hierarchical(d2=2,d3=1)`.
impl FromStr for StructureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .strip_suffix(')')
                    .ok_or_else(|| format!("missing `)` in structure `{s}`"))?;
                (&s[..open], Some(&close[open + 1..]))
            }
            None => (s, None),
        };
        let name = name.trim().to_ascii_lowercase();
        let params = parse_params(args.unwrap_or(""))?;
        let get = |key: &str, pos: usize| -> std::result::Result<usize, String> {
            params
                .iter()
                .find(|(k, _)| k.as_deref() == Some(key))
                .or_else(|| params.iter().filter(|(k, _)| k.is_none()).nth(pos))
                .map(|(_, v)| *v)
                .ok_or_else(|| format!("structure `{name}` needs parameter `{key}`"))
        };
        let no_params = |kind: StructureKind| {
            if params.is_empty() {
                Ok(kind)
            } else {
                Err(format!("structure `{name}` takes no parameters"))
            }
        };
        match name.as_str() {
            "dense" => no_params(StructureKind::Dense),
            "diagonal" => no_params(StructureKind::Diagonal),
            "tril" => no_params(StructureKind::Tril),
            "triu" => no_params(StructureKind::Triu),
            "tril_toeplitz" => no_params(StructureKind::TrilToeplitz),
            "triu_toeplitz" => no_params(StructureKind::TriuToeplitz),
            "block_diagonal" => Ok(StructureKind::BlockDiagonal {
                block: get("k", 0)?,
            }),
            "rank_k_tril" => Ok(StructureKind::RankKTril { k: get("k", 0)? }),
            "rank_k_triu" => Ok(StructureKind::RankKTriu { k: get("k", 0)? }),
            "hierarchical" => Ok(StructureKind::Hierarchical {
                d2: get("d2", 0)?,
                d3: get("d3", 1)?,
            }),
            other => Err(format!("unknown structure `{other}`")),
        }
    }
}

fn parse_params(args: &str) -> std::result::Result<Vec<(Option<String>, usize)>, String> {
    args.split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| {
            let (key, value) = match a.split_once('=') {
                Some((k, v)) => (Some(k.trim().to_string()), v.trim()),
                None => (None, a),
            };
            value
                .parse::<usize>()
                .map(|v| (key, v))
                .map_err(|_| format!("bad structure parameter `{a}`"))
        })
        .collect()
}

/// A sparsity class bound to a dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorStructure {
    kind: StructureKind,
    dim: usize,
}

impl FactorStructure {
    pub fn new(kind: StructureKind, dim: usize) -> Result<Self> {
        let ok = match kind {
            StructureKind::BlockDiagonal { block } => block >= 1 && block <= dim,
            StructureKind::Hierarchical { d2, d3 } => d2 + d3 <= dim,
            StructureKind::RankKTril { k } | StructureKind::RankKTriu { k } => k <= dim,
            _ => true,
        };
        if !ok {
            return Err(Error::contract(
                "FactorStructure::new",
                format!("{kind} is invalid for dimension {dim}"),
            ));
        }
        Ok(Self { kind, dim })
    }

    pub fn dense(dim: usize) -> Self {
        Self {
            kind: StructureKind::Dense,
            dim,
        }
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of scalars needed to store a member of this class.
    pub fn storage_count(&self) -> usize {
        let d = self.dim;
        match self.kind {
            StructureKind::Dense => d * d,
            StructureKind::Diagonal => d,
            StructureKind::BlockDiagonal { block } => {
                let (full, rem) = (d / block, d % block);
                full * block * block + rem * rem
            }
            StructureKind::Tril | StructureKind::Triu => d * (d + 1) / 2,
            StructureKind::TrilToeplitz | StructureKind::TriuToeplitz => d,
            StructureKind::RankKTril { k } | StructureKind::RankKTriu { k } => {
                k * k + k * (d - k) + (d - k)
            }
            StructureKind::Hierarchical { d2, d3 } => {
                let mid = d - d2 - d3;
                d2 * d2 + d2 * (d - d2) + mid + d3 * mid + d3 * d3
            }
        }
    }

    /// Position of entry `(i, j)` in the compact coefficient vector, or
    /// `None` outside the support. Toeplitz classes share coefficients
    /// along bands and always return `None`.
    pub(crate) fn coeff_index(&self, i: usize, j: usize) -> Option<usize> {
        let d = self.dim;
        match self.kind {
            StructureKind::Dense => Some(i * d + j),
            StructureKind::Diagonal => (i == j).then_some(i),
            StructureKind::BlockDiagonal { block } => {
                let b = i / block;
                if j / block != b {
                    return None;
                }
                let start = b * block;
                let size = block.min(d - start);
                Some(b * block * block + (i - start) * size + (j - start))
            }
            StructureKind::Tril => (j <= i).then(|| i * (i + 1) / 2 + j),
            StructureKind::Triu => {
                (i <= j).then(|| i * d - i * (i.saturating_sub(1)) / 2 + (j - i))
            }
            StructureKind::TrilToeplitz | StructureKind::TriuToeplitz => None,
            StructureKind::RankKTril { k } => {
                if i < k {
                    if j < k {
                        Some(i * k + j)
                    } else {
                        Some(k * k + i * (d - k) + (j - k))
                    }
                } else {
                    (i == j).then(|| k * k + k * (d - k) + (i - k))
                }
            }
            StructureKind::RankKTriu { k } => {
                if j < k {
                    if i < k {
                        Some(i * k + j)
                    } else {
                        Some(k * k + (i - k) * k + j)
                    }
                } else {
                    (i == j).then(|| k * k + (d - k) * k + (i - k))
                }
            }
            StructureKind::Hierarchical { d2, d3 } => {
                let bottom = d - d3;
                let mid = bottom - d2;
                let o_top_right = d2 * d2;
                let o_diag = o_top_right + d2 * (d - d2);
                let o_bottom_mid = o_diag + mid;
                let o_bottom_right = o_bottom_mid + d3 * mid;
                if i < d2 {
                    if j < d2 {
                        Some(i * d2 + j)
                    } else {
                        Some(o_top_right + i * (d - d2) + (j - d2))
                    }
                } else if i < bottom {
                    (i == j).then(|| o_diag + (i - d2))
                } else if j < d2 {
                    None
                } else if j < bottom {
                    Some(o_bottom_mid + (i - bottom) * mid + (j - d2))
                } else {
                    Some(o_bottom_right + (i - bottom) * d3 + (j - bottom))
                }
            }
        }
    }

    /// Column ranges of the support in row `i` (at most two).
    pub(crate) fn row_support(&self, i: usize) -> [Range<usize>; 2] {
        let d = self.dim;
        let none = 0..0;
        match self.kind {
            StructureKind::Dense => [0..d, none],
            StructureKind::Diagonal => [i..i + 1, none],
            StructureKind::BlockDiagonal { block } => {
                let start = (i / block) * block;
                [start..(start + block).min(d), none]
            }
            StructureKind::Tril => [0..i + 1, none],
            StructureKind::Triu => [i..d, none],
            StructureKind::TrilToeplitz => [0..i + 1, none],
            StructureKind::TriuToeplitz => [i..d, none],
            StructureKind::RankKTril { k } => {
                if i < k {
                    [0..d, none]
                } else {
                    [i..i + 1, none]
                }
            }
            StructureKind::RankKTriu { k } => {
                if i < k {
                    [0..k, none]
                } else {
                    [0..k, i..i + 1]
                }
            }
            StructureKind::Hierarchical { d2, d3 } => {
                let bottom = d - d3;
                if i < d2 {
                    [0..d, none]
                } else if i < bottom {
                    [i..i + 1, none]
                } else {
                    [d2..d, none]
                }
            }
        }
    }

    /// Whether `(i, j)` lies in the structural support.
    pub fn in_support(&self, i: usize, j: usize) -> bool {
        match self.kind {
            StructureKind::TrilToeplitz => j <= i,
            StructureKind::TriuToeplitz => i <= j,
            _ => self.coeff_index(i, j).is_some(),
        }
    }

    /// Weight the projection map gives entry `(i, j)` of a symmetric
    /// argument: 1 where the mirrored entry is also in the support, 2 where
    /// the support keeps only one of the pair.
    pub(crate) fn projection_weight(&self, i: usize, j: usize) -> f64 {
        if i == j || self.in_support(j, i) {
            1.0
        } else {
            2.0
        }
    }
}

impl fmt::Display for FactorStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (d={})", self.kind, self.dim)
    }
}
