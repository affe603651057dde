//! Precomputed per-item visual/textual vectors and the supervised feature
//! networks that turn them into attention inputs.
//!
//! The visual path has a private stem `d_v -> d_h`; the textual vector enters
//! at `d_h` directly. The final layer maps both branches to `k` and, when a
//! shared matrix is present, couples them:
//!
//! ```text
//! v' = σ(W_v2v v + W_share t + b_v)
//! t' = σ(W_t2t t + W_share v + b_t)
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{IdMap, InteractionDataset, ItemId};
use crate::error::{Error, Result};
use crate::linalg::{Activation, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

/// Feature widths used when a modality has no file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub visual: usize,
    pub textual: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    visual: Matrix,
    textual: Matrix,
    visual_present: Vec<bool>,
    textual_present: Vec<bool>,
}

impl FeatureStore {
    /// Builds a store from dense matrices; every row is marked present.
    pub fn new(visual: Matrix, textual: Matrix) -> Result<Self> {
        if visual.rows() != textual.rows() {
            return Err(Error::Precondition(format!(
                "visual has {} rows, textual has {}",
                visual.rows(),
                textual.rows()
            )));
        }
        if !visual.is_finite() || !textual.is_finite() {
            return Err(Error::NonFinite("feature store".into()));
        }
        let n = visual.rows();
        Ok(FeatureStore {
            visual,
            textual,
            visual_present: vec![true; n],
            textual_present: vec![true; n],
        })
    }

    pub fn num_items(&self) -> usize {
        self.visual.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn textual_dim(&self) -> usize {
        self.textual.cols()
    }

    pub fn visual(&self, item: ItemId) -> &[f64] {
        self.visual.row(item)
    }

    pub fn textual(&self, item: ItemId) -> &[f64] {
        self.textual.row(item)
    }

    pub fn is_present(&self, modality: Modality, item: ItemId) -> bool {
        match modality {
            Modality::Visual => self.visual_present[item],
            Modality::Textual => self.textual_present[item],
        }
    }
}

/// Replaces every row of one modality with zeros and clears its flags.
pub fn zero_fill_modality(mut store: FeatureStore, modality: Modality) -> FeatureStore {
    let (matrix, flags) = match modality {
        Modality::Visual => (&mut store.visual, &mut store.visual_present),
        Modality::Textual => (&mut store.textual, &mut store.textual_present),
    };
    matrix.fill(0.0);
    flags.iter_mut().for_each(|f| *f = false);
    store
}

/// Declared dimension and the rows whose item is known.
type ParsedRows = (usize, Vec<(ItemId, Vec<f64>)>);

fn parse_feature_file(path: &Path, items: &IdMap) -> Result<ParsedRows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format_err = |line: usize, item: &str, message: String| Error::FeatureFormat {
        path: path.to_path_buf(),
        line,
        item: item.to_owned(),
        message,
    };

    let mut dim: Option<usize> = None;
    let mut rows = Vec::new();
    let mut seen = vec![false; items.len()];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(d) = dim else {
            let d = line
                .strip_prefix("dim=")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| format_err(lineno, "-", format!("expected 'dim=<D>' header, found '{line}'")))?;
            dim = Some(d);
            continue;
        };
        let (token, values) = line
            .split_once('\t')
            .ok_or_else(|| format_err(lineno, "-", "expected '<item_id>\\t<values>'".into()))?;
        let vec: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(lineno, token, format!("bad float: {e}")))?;
        if vec.len() != d {
            return Err(format_err(
                lineno,
                token,
                format!("expected {d} values, found {}", vec.len()),
            ));
        }
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(format_err(lineno, token, "non-finite value".into()));
        }
        let Some(item) = items.lookup(token) else {
            log::warn!(
                "{}:{lineno}: item '{token}' not in dataset, row ignored",
                path.display()
            );
            continue;
        };
        if std::mem::replace(&mut seen[item], true) {
            return Err(format_err(lineno, token, "duplicate item row".into()));
        }
        rows.push((item, vec));
    }
    let dim = dim.ok_or_else(|| format_err(0, "-", "missing 'dim=<D>' header".into()))?;
    Ok((dim, rows))
}

fn load_modality(path: Option<&Path>, items: &IdMap, fallback_dim: usize) -> Result<(Matrix, Vec<bool>)> {
    let n = items.len();
    let Some(path) = path else {
        return Ok((Matrix::zeros(n, fallback_dim), vec![false; n]));
    };
    let (dim, rows) = parse_feature_file(path, items)?;
    let mut matrix = Matrix::zeros(n, dim);
    let mut present = vec![false; n];
    for (item, vec) in rows {
        matrix.row_mut(item).copy_from_slice(&vec);
        present[item] = true;
    }
    Ok((matrix, present))
}

/// Loads visual and textual feature files. Items without a row, or a whole
/// absent file, get zero vectors with the presence flag cleared.
pub fn load_feature_store(
    visual_path: Option<&Path>,
    textual_path: Option<&Path>,
    data: &InteractionDataset,
    fallback: FeatureDims,
) -> Result<FeatureStore> {
    let (visual, visual_present) = load_modality(visual_path, data.item_ids(), fallback.visual)?;
    let (textual, textual_present) = load_modality(textual_path, data.item_ids(), fallback.textual)?;
    Ok(FeatureStore {
        visual,
        textual,
        visual_present,
        textual_present,
    })
}

/// Writes a matrix in the text feature format, one row per item token.
pub fn write_feature_file(path: &Path, items: &IdMap, features: &Matrix) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = format!("dim={}\n", features.cols());
    for item in 0..features.rows() {
        let token = items.token(item).unwrap_or("?");
        let _ = write!(out, "{token}\t");
        for (c, v) in features.row(item).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Textual branch of the final feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualBranch {
    /// `k x d_h`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetParams {
    /// `d_h x d_v`
    pub stem_weight: Matrix,
    pub stem_bias: Vec<f64>,
    /// `k x d_h`
    pub visual_weight: Matrix,
    pub visual_bias: Vec<f64>,
    /// Absent for the image-only model.
    pub textual: Option<TextualBranch>,
    /// `k x d_h`, used in both directions. Absent when the branches are
    /// not coupled.
    pub share: Option<Matrix>,
}

/// Intermediate values of one item's pass through the feature networks.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    stem_pre: Vec<f64>,
    hidden_visual: Vec<f64>,
    pre_visual: Vec<f64>,
    pre_textual: Option<Vec<f64>>,
    pub visual: Vec<f64>,
    pub textual: Option<Vec<f64>>,
}

impl FeatureNetParams {
    pub fn hidden_dim(&self) -> usize {
        self.stem_weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.visual_weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        FeatureNetParams {
            stem_weight: z(&self.stem_weight),
            stem_bias: vec![0.0; self.stem_bias.len()],
            visual_weight: z(&self.visual_weight),
            visual_bias: vec![0.0; self.visual_bias.len()],
            textual: self.textual.as_ref().map(|t| TextualBranch {
                weight: z(&t.weight),
                bias: vec![0.0; t.bias.len()],
            }),
            share: self.share.as_ref().map(z),
        }
    }

    fn final_layer_pre(&self, hidden_visual: &[f64], hidden_textual: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut pre_visual = self.visual_bias.clone();
        self.visual_weight.gemv_acc(hidden_visual, &mut pre_visual);
        if let Some(share) = &self.share {
            share.gemv_acc(hidden_textual, &mut pre_visual);
        }
        let pre_textual = self.textual.as_ref().map(|branch| {
            let mut pre = branch.bias.clone();
            branch.weight.gemv_acc(hidden_textual, &mut pre);
            if let Some(share) = &self.share {
                share.gemv_acc(hidden_visual, &mut pre);
            }
            pre
        });
        (pre_visual, pre_textual)
    }

    /// The coupled final layer applied to hidden vectors `v^l`, `t^l`
    /// (after the visual stem).
    pub fn shared_layer(
        &self,
        hidden_visual: &[f64],
        hidden_textual: &[f64],
        act: Activation,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let (pv, pt) = self.final_layer_pre(hidden_visual, hidden_textual);
        let f = |p: &Vec<f64>| p.iter().map(|&x| act.apply(x)).collect::<Vec<_>>();
        (f(&pv), pt.as_ref().map(f))
    }

    /// Forward pass for one item given its raw vectors.
    pub fn forward_item(&self, visual_raw: &[f64], textual_raw: &[f64], act: Activation) -> FeatureTrace {
        let mut stem_pre = self.stem_bias.clone();
        self.stem_weight.gemv_acc(visual_raw, &mut stem_pre);
        let hidden_visual: Vec<f64> = stem_pre.iter().map(|&x| act.apply(x)).collect();
        let (pre_visual, pre_textual) = self.final_layer_pre(&hidden_visual, textual_raw);
        let visual = pre_visual.iter().map(|&x| act.apply(x)).collect();
        let textual = pre_textual.as_ref().map(|p| p.iter().map(|&x| act.apply(x)).collect());
        FeatureTrace {
            stem_pre,
            hidden_visual,
            pre_visual,
            pre_textual,
            visual,
            textual,
        }
    }

    /// Accumulates into `grads` the gradient of a loss whose derivatives with
    /// respect to this item's outputs are `d_visual` / `d_textual`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_item(
        &self,
        trace: &FeatureTrace,
        visual_raw: &[f64],
        textual_raw: &[f64],
        d_visual: &[f64],
        d_textual: Option<&[f64]>,
        act: Activation,
        grads: &mut FeatureNetParams,
    ) {
        let d_pre_v: Vec<f64> = d_visual
            .iter()
            .zip(&trace.pre_visual)
            .map(|(g, &x)| g * act.derivative(x))
            .collect();
        let d_pre_t: Option<Vec<f64>> = match (d_textual, &trace.pre_textual) {
            (Some(dt), Some(pre)) => Some(dt.iter().zip(pre).map(|(g, &x)| g * act.derivative(x)).collect()),
            _ => None,
        };

        grads.visual_weight.add_outer(1.0, &d_pre_v, &trace.hidden_visual);
        crate::linalg::axpy(1.0, &d_pre_v, &mut grads.visual_bias);

        let mut d_hidden = vec![0.0; self.hidden_dim()];
        self.visual_weight.gemv_t_acc(&d_pre_v, &mut d_hidden);

        if let Some(share) = &self.share {
            let g_share = grads.share.as_mut().expect("gradient layout matches params");
            g_share.add_outer(1.0, &d_pre_v, textual_raw);
            if let Some(dpt) = &d_pre_t {
                g_share.add_outer(1.0, dpt, &trace.hidden_visual);
                share.gemv_t_acc(dpt, &mut d_hidden);
            }
        }
        if let (Some(dpt), Some(g_text)) = (&d_pre_t, grads.textual.as_mut()) {
            g_text.weight.add_outer(1.0, dpt, textual_raw);
            crate::linalg::axpy(1.0, dpt, &mut g_text.bias);
        }

        let d_stem: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.stem_pre)
            .map(|(g, &x)| g * act.derivative(x))
            .collect();
        grads.stem_weight.add_outer(1.0, &d_stem, visual_raw);
        crate::linalg::axpy(1.0, &d_stem, &mut grads.stem_bias);
    }
}

/// Transformed features: row `r` of each matrix belongs to the `r`-th
/// requested item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatureEmbeddings {
    pub visual: Matrix,
    pub textual: Option<Matrix>,
}

impl ItemFeatureEmbeddings {
    /// Embeddings for every item, indexed by item id.
    pub fn for_all_items(store: &FeatureStore, params: &FeatureNetParams, act: Activation) -> Result<Self> {
        let items: Vec<ItemId> = (0..store.num_items()).collect();
        feature_network_forward(store, params, &items, act)
    }
}

pub fn feature_network_forward(
    store: &FeatureStore,
    params: &FeatureNetParams,
    items: &[ItemId],
    act: Activation,
) -> Result<ItemFeatureEmbeddings> {
    check_shapes(store, params)?;
    if let Some(&bad) = items.iter().find(|&&i| i >= store.num_items()) {
        return Err(Error::UnknownItem(bad.to_string()));
    }
    let traces: Vec<FeatureTrace> = items
        .par_iter()
        .map(|&i| params.forward_item(store.visual(i), store.textual(i), act))
        .collect();
    let k = params.output_dim();
    let mut visual = Matrix::zeros(items.len(), k);
    let mut textual = params.textual.as_ref().map(|_| Matrix::zeros(items.len(), k));
    for (r, (trace, &item)) in traces.iter().zip(items).enumerate() {
        if trace.visual.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("visual feature embedding of item {item}")));
        }
        visual.row_mut(r).copy_from_slice(&trace.visual);
        if let (Some(t), Some(out)) = (&trace.textual, textual.as_mut()) {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("textual feature embedding of item {item}")));
            }
            out.row_mut(r).copy_from_slice(t);
        }
    }
    Ok(ItemFeatureEmbeddings { visual, textual })
}

pub(crate) fn check_shapes(store: &FeatureStore, params: &FeatureNetParams) -> Result<()> {
    let ok = params.stem_weight.cols() == store.visual_dim()
        && params.hidden_dim() == store.textual_dim()
        && params.visual_weight.cols() == params.hidden_dim();
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "feature network expects visual dim {} and textual dim {}, store has {} and {}",
            params.stem_weight.cols(),
            params.hidden_dim(),
            store.visual_dim(),
            store.textual_dim()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn identity_net(share: bool) -> FeatureNetParams {
        FeatureNetParams {
            stem_weight: Matrix::identity(2),
            stem_bias: vec![0.0; 2],
            visual_weight: Matrix::identity(2),
            visual_bias: vec![0.0; 2],
            textual: Some(TextualBranch {
                weight: Matrix::identity(2),
                bias: vec![0.0; 2],
            }),
            share: share.then(|| Matrix::identity(2)),
        }
    }

    #[test]
    fn shared_unit_hand_example() {
        let net = identity_net(true);
        let (v, t) = net.shared_layer(&[1.0, -1.0], &[1.0, 1.0], Activation::Relu);
        assert_eq!(v, vec![2.0, 0.0]);
        assert_eq!(t.unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn zero_share_decouples_branches() {
        let mut net = identity_net(true);
        net.share = Some(Matrix::zeros(2, 2));
        let a = net.forward_item(&[0.3, 0.7], &[1.0, 2.0], Activation::Relu);
        let b = net.forward_item(&[0.3, 0.7], &[-5.0, 9.0], Activation::Relu);
        assert_eq!(a.visual, b.visual);
        let c = net.forward_item(&[4.0, 1.0], &[1.0, 2.0], Activation::Relu);
        assert_eq!(a.textual, c.textual);
    }

    #[test]
    fn zero_text_carries_only_shared_visual() {
        let mut net = identity_net(true);
        net.share = Some(Matrix::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]));
        let trace = net.forward_item(&[1.0, 2.0], &[0.0, 0.0], Activation::Relu);
        // t' = relu(W_share v) with v = relu(stem) = [1, 2]
        assert_eq!(trace.textual.unwrap(), vec![2.5, 3.0]);
    }

    #[test]
    fn share_perturbation_moves_both_outputs() {
        let mut net = identity_net(true);
        net.share = Some(Matrix::from_rows(&[vec![0.2, 0.1], vec![0.3, 0.4]]));
        let base = net.forward_item(&[0.5, 0.8], &[0.6, 0.9], Activation::Softplus);
        net.share.as_mut().unwrap()[(0, 1)] += 1e-4;
        let moved = net.forward_item(&[0.5, 0.8], &[0.6, 0.9], Activation::Softplus);
        assert!((moved.visual[0] - base.visual[0]).abs() > 1e-7);
        assert!((moved.textual.unwrap()[0] - base.textual.unwrap()[0]).abs() > 1e-7);
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn dataset() -> InteractionDataset {
        InteractionDataset::from_positives(3, vec![vec![0, 1, 2]]).unwrap()
    }

    #[test]
    fn load_store_with_missing_rows_and_files() {
        let visual = write_tmp("# comment\ndim=2\n0\t1.0,2.0\n2\t3,4\nzzz\t1,1\n");
        let dims = FeatureDims { visual: 2, textual: 4 };
        let store = load_feature_store(Some(visual.path()), None, &dataset(), dims).unwrap();
        assert_eq!(store.visual(0), &[1.0, 2.0]);
        assert_eq!(store.visual(1), &[0.0, 0.0]);
        assert!(!store.is_present(Modality::Visual, 1));
        assert!(store.is_present(Modality::Visual, 2));
        assert_eq!(store.textual_dim(), 4);
        assert!((0..3).all(|i| !store.is_present(Modality::Textual, i)));
    }

    #[test]
    fn short_row_is_a_format_error() {
        let f = write_tmp("dim=3\n0\t1,2,3\n1\t1,2\n");
        let err =
            load_feature_store(Some(f.path()), None, &dataset(), FeatureDims { visual: 3, textual: 2 }).unwrap_err();
        match err {
            Error::FeatureFormat { line, item, .. } => assert_eq!((line, item.as_str()), (3, "1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_fill_is_idempotent_and_shape_preserving() {
        let store = FeatureStore::new(
            Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]),
            Matrix::from_rows(&[vec![4.0, 5.0]]),
        )
        .unwrap();
        let once = zero_fill_modality(store.clone(), Modality::Textual);
        assert_eq!(once.textual(0), &[0.0, 0.0]);
        assert_eq!(once.visual(0), store.visual(0));
        assert!(!once.is_present(Modality::Textual, 0));
        let twice = zero_fill_modality(once.clone(), Modality::Textual);
        assert_eq!(once, twice);
        let v = zero_fill_modality(store, Modality::Visual);
        assert_eq!(v.visual_dim(), 3);
    }

    #[test]
    fn forward_is_deterministic_over_item_order() {
        let store = FeatureStore::new(
            Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.9], vec![0.3, 0.3]]),
            Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![0.0, 1.0]]),
        )
        .unwrap();
        let mut net = identity_net(true);
        net.share = Some(Matrix::from_rows(&[vec![0.2, -0.1], vec![0.3, 0.4]]));
        let all = ItemFeatureEmbeddings::for_all_items(&store, &net, Activation::Relu).unwrap();
        let sub = feature_network_forward(&store, &net, &[2, 0], Activation::Relu).unwrap();
        assert_eq!(sub.visual.row(0), all.visual.row(2));
        assert_eq!(sub.visual.row(1), all.visual.row(0));
        assert_eq!(
            all,
            ItemFeatureEmbeddings::for_all_items(&store, &net, Activation::Relu).unwrap()
        );
    }
}
