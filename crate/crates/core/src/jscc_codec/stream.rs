use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Complex symbol as `[re, im]`.
pub type Complex = [f64; 2];

/// Variable-length channel symbols: patch `i` carries `k[i]` complex symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolStream {
    k: Vec<u32>,
    y: Vec<Vec<Complex>>,
}

impl SymbolStream {
    pub fn new(k: Vec<u32>, y: Vec<Vec<Complex>>) -> Result<Self> {
        if k.len() != y.len() {
            return Err(Error::contract(format!(
                "{} lengths for {} patches",
                k.len(),
                y.len()
            )));
        }
        if let Some(i) = (0..k.len()).find(|&i| y[i].len() != k[i] as usize) {
            return Err(Error::contract(format!(
                "patch {i} has {} symbols but k = {}",
                y[i].len(),
                k[i]
            )));
        }
        Ok(SymbolStream { k, y })
    }

    pub fn k(&self) -> &[u32] {
        &self.k
    }

    pub fn symbols(&self) -> &[Vec<Complex>] {
        &self.y
    }

    pub fn patches(&self) -> usize {
        self.k.len()
    }

    pub fn total_symbols(&self) -> u64 {
        self.k.iter().map(|&k| u64::from(k)).sum()
    }

    /// `Σ_i ‖y_i‖²`.
    pub fn energy(&self) -> f64 {
        self.y.iter().flatten().map(|[a, b]| a * a + b * b).sum()
    }

    /// Same lengths, symbols transformed one at a time.
    pub fn map_symbols(&self, mut f: impl FnMut(Complex) -> Complex) -> SymbolStream {
        SymbolStream {
            k: self.k.clone(),
            y: self
                .y
                .iter()
                .map(|p| p.iter().map(|&s| f(s)).collect())
                .collect(),
        }
    }

    /// `u32 L`, `L × u32 k_i`, then every symbol as two `f64`, all little-endian.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.k.len() + 16 * self.total_symbols() as usize);
        out.extend_from_slice(&(self.k.len() as u32).to_le_bytes());
        for &k in &self.k {
            out.extend_from_slice(&k.to_le_bytes());
        }
        for [re, im] in self.y.iter().flatten() {
            out.extend_from_slice(&re.to_le_bytes());
            out.extend_from_slice(&im.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("symbol stream", d.to_string());
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let l = u32_at(0)? as usize;
        let k = (0..l)
            .map(|i| u32_at(4 + 4 * i))
            .collect::<Result<Vec<_>>>()?;
        let mut at = 4 + 4 * l;
        let total: usize = k.iter().map(|&k| k as usize).sum();
        if bytes.len() != at + 16 * total {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                16 * total,
                bytes.len().saturating_sub(at)
            )));
        }
        let mut f = || {
            let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
            v
        };
        let y = k
            .iter()
            .map(|&n| (0..n).map(|_| [f(), f()]).collect())
            .collect();
        SymbolStream::new(k, y)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_contract() {
        assert!(SymbolStream::new(vec![1, 2], vec![vec![[0.0; 2]], vec![[0.0; 2]]]).is_err());
        assert!(SymbolStream::new(vec![1], vec![]).is_err());
        let s = SymbolStream::new(
            vec![1, 2],
            vec![vec![[3.0, 4.0]], vec![[1.0, 0.0], [0.0, 1.0]]],
        )
        .unwrap();
        assert_eq!(s.total_symbols(), 3);
        assert_eq!(s.energy(), 27.0);
    }

    #[test]
    fn dump_layout_and_round_trip() {
        let s = SymbolStream::new(
            vec![2, 1],
            vec![vec![[1.0, -1.0], [0.5, 0.25]], vec![[-3.0, 2.0]]],
        )
        .unwrap();
        let b = s.dump();
        assert_eq!(&b[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 3 * 16);
        assert_eq!(SymbolStream::parse(&b).unwrap(), s);
        assert!(SymbolStream::parse(&b[..b.len() - 1]).is_err());
    }
}
