//! Rearrangement of named scalp channels into a dense rectangular grid.
//!
//! A [`MontageMap`] is data, not code: every computation here only relies on
//! the map being a bijection between grid cells and channel names. Channels
//! are always resolved by name (case-insensitive), never by position.
//!
//! Text format: `#` starts a comment line; each data line is `row col name`,
//! whitespace separated.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const DEFAULT_MONTAGE: &str = include_str!("../assets/default_montage.txt");
pub const REDUCED_MONTAGE: &str = include_str!("../assets/reduced_montage.txt");

/// Midline channels allowed off the diagonal.
const SHIFTED_MIDLINE: [&str; 2] = ["Fz", "AFz"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MontageMap {
    rows: usize,
    cols: usize,
    /// Channel name per cell, row-major.
    names: Vec<String>,
}

impl MontageMap {
    pub fn from_cells(rows: usize, cols: usize, cells: &[Cell]) -> Result<Self> {
        let n = rows * cols;
        if cells.len() != n {
            return Err(Error::EntryCount {
                expected: n,
                found: cells.len(),
            });
        }
        let mut names: Vec<Option<String>> = vec![None; n];
        let mut seen = std::collections::HashSet::new();
        for cell in cells {
            if cell.row >= rows || cell.col >= cols {
                return Err(Error::OutOfRange(format!(
                    "cell ({}, {}) outside {rows}x{cols} grid",
                    cell.row, cell.col
                )));
            }
            let slot = &mut names[cell.row * cols + cell.col];
            if slot.is_some() {
                return Err(Error::DuplicateCell {
                    row: cell.row,
                    col: cell.col,
                });
            }
            if !seen.insert(cell.name.to_ascii_lowercase()) {
                return Err(Error::DuplicateChannel(cell.name.clone()));
            }
            *slot = Some(cell.name.clone());
        }
        Ok(Self {
            rows,
            cols,
            names: names.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Parse the 8×8 text format (64 entries).
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_grid(text, 8, 8)
    }

    pub fn parse_with_grid(text: &str, rows: usize, cols: usize) -> Result<Self> {
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |detail: String| Error::MontageParse {
                line: i + 1,
                detail,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected `row col name`, got {} fields",
                    fields.len()
                )));
            }
            let index = |s: &str| -> Result<usize> {
                let v: usize = s
                    .parse()
                    .map_err(|_| parse_err(format!("{s:?} is not a grid index")))?;
                Ok(v)
            };
            cells.push(Cell {
                row: index(fields[0])?,
                col: index(fields[1])?,
                name: fields[2].to_string(),
            });
        }
        Self::from_cells(rows, cols, &cells)
    }

    pub fn default_8x8() -> Self {
        Self::parse(DEFAULT_MONTAGE).expect("bundled montage is valid")
    }

    pub fn reduced_4x4() -> Self {
        Self::parse_with_grid(REDUCED_MONTAGE, 4, 4).expect("bundled montage is valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn channel_at(&self, row: usize, col: usize) -> &str {
        &self.names[row * self.cols + col]
    }

    /// Channel names in row-major cell order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cell_of(&self, name: &str) -> Option<(usize, usize)> {
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| (i / self.cols, i % self.cols))
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, name)| Cell {
                row: i / self.cols,
                col: i % self.cols,
                name: name.clone(),
            })
            .collect()
    }

    /// Midline (`…z`) channels off the main diagonal, other than the
    /// documented shifted ones.
    pub fn midline_warnings(&self) -> Vec<String> {
        self.cells()
            .into_iter()
            .filter(|c| {
                let z = c.name.ends_with('z') || c.name.ends_with('Z');
                let shifted = SHIFTED_MIDLINE
                    .iter()
                    .any(|s| s.eq_ignore_ascii_case(&c.name));
                z && c.row != c.col && !shifted
            })
            .map(|c| format!("midline channel {} at ({}, {}) is off the diagonal", c.name, c.row, c.col))
            .collect()
    }

    /// For each cell (row-major) the index of its channel in `channel_names`.
    pub fn resolve(&self, channel_names: &[String]) -> Result<Vec<usize>> {
        self.names
            .iter()
            .map(|n| {
                channel_names
                    .iter()
                    .position(|c| c.eq_ignore_ascii_case(n))
                    .ok_or_else(|| Error::UnknownChannel(n.clone()))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# row col name\n");
        for c in self.cells() {
            s.push_str(&format!("{} {} {}\n", c.row, c.col, c.name));
        }
        s
    }
}

/// Read, validate, and log midline-rule warnings.
pub fn load_montage(path: impl AsRef<Path>) -> Result<MontageMap> {
    let map = MontageMap::parse(&std::fs::read_to_string(path)?)?;
    for w in map.midline_warnings() {
        warn!("{w}");
    }
    Ok(map)
}

/// Rearrange an epoch `[channel][t]` into a grid `[row][col][t]`.
pub fn to_grid<T: Copy>(
    epoch: &[T],
    n_samples: usize,
    channel_names: &[String],
    map: &MontageMap,
) -> Result<Vec<T>> {
    if epoch.len() != channel_names.len() * n_samples {
        return Err(Error::Dimension(format!(
            "epoch holds {} values, expected {} channels x {} samples",
            epoch.len(),
            channel_names.len(),
            n_samples
        )));
    }
    let order = map.resolve(channel_names)?;
    let mut grid = Vec::with_capacity(order.len() * n_samples);
    for &ch in &order {
        grid.extend_from_slice(&epoch[ch * n_samples..(ch + 1) * n_samples]);
    }
    Ok(grid)
}

/// Inverse of [`to_grid`]; `channel_names` must name exactly the map's channels.
pub fn from_grid<T: Copy + Default>(
    grid: &[T],
    n_samples: usize,
    channel_names: &[String],
    map: &MontageMap,
) -> Result<Vec<T>> {
    if grid.len() != map.len() * n_samples {
        return Err(Error::Dimension(format!(
            "grid holds {} values, expected {} cells x {} samples",
            grid.len(),
            map.len(),
            n_samples
        )));
    }
    if channel_names.len() != map.len() {
        return Err(Error::EntryCount {
            expected: map.len(),
            found: channel_names.len(),
        });
    }
    let order = map.resolve(channel_names)?;
    let mut epoch = vec![T::default(); grid.len()];
    for (cell, &ch) in order.iter().enumerate() {
        epoch[ch * n_samples..(ch + 1) * n_samples]
            .copy_from_slice(&grid[cell * n_samples..(cell + 1) * n_samples]);
    }
    Ok(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(map: &MontageMap) -> Vec<String> {
        map.names().to_vec()
    }

    #[test]
    fn bundled_maps_are_valid() {
        let m = MontageMap::default_8x8();
        assert_eq!(m.len(), 64);
        assert!(m.midline_warnings().is_empty());
        for (i, z) in ["AFz", "Fz", "Cz", "CPz", "Pz", "POz", "Oz", "Iz"].iter().enumerate() {
            assert_eq!(m.channel_at(i, i), *z);
        }
        // homologous pairs sit at transposed cells
        let (r, c) = m.cell_of("O1").unwrap();
        assert_eq!(m.channel_at(c, r), "O2");
        assert_eq!(MontageMap::reduced_4x4().len(), 16);
    }

    #[test]
    fn duplicate_cell() {
        let mut text = DEFAULT_MONTAGE.replace("0 1 Fp2", "0 0 Fp2");
        assert!(matches!(
            MontageMap::parse(&text).unwrap_err(),
            Error::DuplicateCell { row: 0, col: 0 }
        ));
        text = DEFAULT_MONTAGE.replace("0 1 Fp2", "0 1 Fp1");
        assert!(matches!(
            MontageMap::parse(&text).unwrap_err(),
            Error::DuplicateChannel(_)
        ));
    }

    #[test]
    fn wrong_line_count() {
        let text: String = DEFAULT_MONTAGE
            .lines()
            .filter(|l| *l != "7 7 Iz")
            .map(|l| format!("{l}\n"))
            .collect();
        let err = MontageMap::parse(&text).unwrap_err();
        assert!(err.to_string().contains("expected 64 entries"), "{err}");
    }

    #[test]
    fn out_of_range_index() {
        let text = DEFAULT_MONTAGE.replace("7 7 Iz", "8 7 Iz");
        assert!(matches!(MontageMap::parse(&text).unwrap_err(), Error::OutOfRange(_)));
        let text = DEFAULT_MONTAGE.replace("7 7 Iz", "-1 7 Iz");
        assert!(matches!(
            MontageMap::parse(&text).unwrap_err(),
            Error::MontageParse { .. }
        ));
    }

    #[test]
    fn midline_rule_is_a_warning() {
        let text = DEFAULT_MONTAGE
            .replace("7 7 Iz", "7 7 XX")
            .replace("7 6 P1", "7 6 Iz")
            .replace("7 7 XX", "7 7 P1");
        let m = MontageMap::parse(&text).unwrap();
        assert_eq!(m.midline_warnings().len(), 1);
    }

    #[test]
    fn one_hot_lands_in_its_cell() {
        let m = MontageMap::default_8x8();
        let mut chans = names(&m);
        chans.reverse();
        let t = 3;
        let k = chans.iter().position(|c| c == "PO4").unwrap();
        let mut epoch = vec![0.0f64; chans.len() * t];
        epoch[k * t] = 1.0;
        let grid = to_grid(&epoch, t, &chans, &m).unwrap();
        let nz: Vec<usize> = grid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let (r, c) = m.cell_of("PO4").unwrap();
        assert_eq!(nz, vec![(r * 8 + c) * t]);
    }

    #[test]
    fn unknown_channel() {
        let m = MontageMap::default_8x8();
        let mut chans = names(&m);
        chans[5] = "Xx".into();
        let err = to_grid(&vec![0.0; 64], 1, &chans, &m).unwrap_err();
        assert!(matches!(err, Error::UnknownChannel(_)));
    }

    #[test]
    fn constant_grid_gives_constant_epoch() {
        let m = MontageMap::default_8x8();
        let e = from_grid(&vec![2.0; 64 * 5], 5, &names(&m), &m).unwrap();
        assert!(e.iter().all(|&v| v == 2.0));
    }
}
