//! Input-gradient saliency maps laid out on a 21x21 grid.
//!
//! Feature `k` of the pair vector lands in cell `(k / 21, k % 21)`; the 25
//! cells after the last feature are padding and always zero.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::featurize::{Label, PairFeatures};
use crate::neuralnet::{MlpModel, Mode};
use crate::orbitsim::ObsId;

pub const GRID: usize = 21;
pub const CELLS: usize = GRID * GRID;

/// Gradient of the `class` log-probability with respect to each input feature.
pub fn input_gradient(model: &MlpModel, features: ArrayView1<f64>, class: usize) -> Result<Array1<f64>> {
    if model.mode() != Mode::Eval {
        return Err(Error::State("saliency needs a finalized (eval-mode) model".into()));
    }
    let batch = features.insert_axis(Axis(0));
    let g = model.input_gradients(batch, class)?;
    Ok(g.row(0).to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Row-major `GRID x GRID` cells.
    pub cells: Vec<f64>,
    /// `true` for padding cells.
    pub pad_mask: Vec<bool>,
    pub obs_ids: (ObsId, ObsId),
    pub class: Label,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * GRID + col]
    }

    pub fn n_active(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    /// Active cells in feature order.
    pub fn active(&self) -> &[f64] {
        &self.cells[..self.n_active()]
    }

    /// Index of the largest active cell.
    pub fn argmax(&self) -> usize {
        self.active()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// Scale so the largest cell is 1; an all-zero map is left unchanged.
    pub fn normalized(&self) -> SaliencyMap {
        let max = self.cells.iter().fold(0.0f64, |m, &v| m.max(v));
        let mut out = self.clone();
        if max > 0.0 {
            out.cells.iter_mut().for_each(|v| *v /= max);
        }
        out
    }

    pub fn file_stem(&self) -> String {
        let class = match self.class {
            Label::Match => "match",
            Label::NoMatch => "nomatch",
        };
        format!("saliency_{}_{}_{class}", self.obs_ids.0, self.obs_ids.1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("saliency csv", e);
        for row in self.cells.chunks(GRID) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Binary 8-bit PGM, max-normalized.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        let norm = self.normalized();
        let mut bytes = format!("P5\n{GRID} {GRID}\n255\n").into_bytes();
        bytes.extend(norm.cells.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out.write_all(&bytes).map_err(|e| Error::io("saliency pgm", e))
    }

    /// Write `<stem>.csv` and `<stem>.pgm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = self.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        let pgm = dir.join(format!("{stem}.pgm"));
        self.write_csv(std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?)?;
        self.write_pgm(std::fs::File::create(&pgm).map_err(|e| Error::io(&pgm, e))?)?;
        Ok((csv, pgm))
    }
}

/// Absolute input gradient of the pair's true class, on the grid.
pub fn saliency_map(model: &MlpModel, pair: &PairFeatures) -> Result<SaliencyMap> {
    let class = pair
        .label
        .ok_or_else(|| Error::MissingLabels("saliency needs the pair's true class".into()))?;
    let n = pair.features.len();
    if n > CELLS {
        return Err(Error::Shape {
            expected: CELLS,
            found: n,
        });
    }
    let grad = input_gradient(model, ArrayView1::from(&pair.features), class.class())?;
    let mut cells = vec![0.0; CELLS];
    for (c, g) in cells.iter_mut().zip(grad.iter()) {
        *c = g.abs();
    }
    let pad_mask = (0..CELLS).map(|k| k >= n).collect();
    Ok(SaliencyMap {
        cells,
        pad_mask,
        obs_ids: pair.obs_ids,
        class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MlpModel::new(416, &[16, 8, 8, 8, 8, 8], &mut rng).unwrap();
        for n in &mut m.norms {
            n.running_var.fill(0.5);
            n.running_mean.fill(0.3);
        }
        m.set_mode(Mode::Eval);
        m
    }

    fn pair(seed: u64, label: Label) -> PairFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PairFeatures {
            features: (0..416).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: Some(label),
            obs_ids: (ObsId(seed), ObsId(seed + 1)),
        }
    }

    #[test]
    fn zero_model_has_zero_gradient() {
        let mut m = MlpModel::zeros(416, &[4; 6]).unwrap();
        m.set_mode(Mode::Eval);
        let map = saliency_map(&m, &pair(1, Label::Match)).unwrap();
        assert!(map.cells.iter().all(|&v| v == 0.0));
        assert_eq!(map.normalized(), map);
    }

    #[test]
    fn padding_and_layout() {
        let m = model(2);
        let p = pair(3, Label::NoMatch);
        let map = saliency_map(&m, &p).unwrap();
        assert_eq!(map.n_active(), 416);
        assert!(map.cells[416..].iter().all(|&v| v == 0.0));
        assert!(map.pad_mask[416..].iter().all(|&b| b));
        let grad = input_gradient(&m, ArrayView1::from(&p.features), 0).unwrap();
        let abs: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
        assert_eq!(map.active(), abs.as_slice());
        assert_eq!(map.get(1, 0), abs[21]);

        let norm = map.normalized();
        let max = norm.cells.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn class_gradients_are_opposite() {
        // two-class log-softmax: d log p1 = -(p0/p1) d log p0 elementwise
        let m = model(4);
        let p = pair(5, Label::Match);
        let g0 = input_gradient(&m, ArrayView1::from(&p.features), 0).unwrap();
        let g1 = input_gradient(&m, ArrayView1::from(&p.features), 1).unwrap();
        for (a, b) in g0.iter().zip(g1.iter()) {
            assert!(a * b <= 0.0);
        }
    }

    #[test]
    fn errors() {
        let m = model(6);
        let mut p = pair(7, Label::Match);
        assert!(matches!(
            input_gradient(&m, ArrayView1::from(&p.features), 3),
            Err(Error::Domain(_))
        ));
        p.label = None;
        assert!(matches!(saliency_map(&m, &p), Err(Error::MissingLabels(_))));
        let mut train_mode = m.clone();
        train_mode.set_mode(Mode::Train);
        assert!(matches!(
            saliency_map(&train_mode, &pair(8, Label::Match)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn exports() {
        let m = model(9);
        let map = saliency_map(&m, &pair(10, Label::NoMatch)).unwrap();
        let mut csv = Vec::new();
        map.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.lines().all(|l| l.split(',').count() == 21));
        let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
        assert!(last[21 - 4..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0));

        let mut pgm = Vec::new();
        map.write_pgm(&mut pgm).unwrap();
        let header = b"P5\n21 21\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 441);
        assert_eq!(*pgm[header.len()..].iter().max().unwrap(), 255);
        assert_eq!(map.file_stem(), "saliency_10_11_nomatch");
    }
}
