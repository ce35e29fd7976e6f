//! Recommendation model: `ŷ = σ(f([e_u ; e_i]))` with `f` a LeakyReLU MLP,
//! trained on squared error against binary labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_mlp, read_optimizer, write_mlp, write_optimizer, Reader, Writer};
use crate::data::Interaction;
use crate::embedding::{EmbeddingStore, IdKey, Slot, SlotGradients};
use crate::error::{check_dim, Error, Result};
use crate::nn::{sigmoid, Activation, AdamConfig, LayerGrads, Matrix, Mlp, MlpOptimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecModelConfig {
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for RecModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512],
            adam: AdamConfig::with_lr(1e-3),
        }
    }
}

/// Predictions and labels for one evaluated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Evaluation {
    pub fn squared_errors(&self) -> Vec<f64> {
        self.predictions
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| (p - y) * (p - y))
            .collect()
    }

    pub fn mse(&self) -> f64 {
        let e = self.squared_errors();
        e.iter().sum::<f64>() / e.len().max(1) as f64
    }

    /// Fraction with `(ŷ > 0.5) == y`.
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| predicted_class(**p) == **y)
            .count();
        correct as f64 / self.labels.len().max(1) as f64
    }
}

/// Class 1 iff `ŷ > 0.5`.
pub fn predicted_class(prediction: f64) -> f64 {
    if prediction > 0.5 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    /// `(ŷ_j − y_j)²` per sample, in batch order.
    pub per_sample: Vec<f64>,
}

/// Everything one backward pass produces.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub loss: BatchLoss,
    pub layers: Vec<LayerGrads>,
    /// Summed over every sample that touched each slot.
    pub slots: SlotGradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    dim: usize,
    mlp: Mlp,
    opt: MlpOptimizer,
}

fn labels_of(batch: &[Interaction]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|x| {
            if x.label <= 1 {
                Ok(x.label_f64())
            } else {
                Err(Error::invalid("label", format!("{} not in {{0, 1}}", x.label)))
            }
        })
        .collect()
}

impl RecModel {
    pub fn new<R: Rng + ?Sized>(config: &RecModelConfig, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "embedding dimension must be >= 1"));
        }
        config.adam.validate()?;
        let mut dims = vec![2 * dim];
        dims.extend(&config.hidden);
        dims.push(1);
        let mlp = Mlp::kaiming(&dims, Activation::LeakyRelu, Activation::Identity, rng)?;
        let opt = MlpOptimizer::new(&mlp, config.adam);
        Ok(Self { dim, mlp, opt })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    fn gather(&self, store: &EmbeddingStore, batch: &[Interaction]) -> Result<(Matrix, Vec<(Slot, Slot)>)> {
        check_dim("embedding dim", self.dim, store.dim())?;
        let d = self.dim;
        let mut x = Matrix::zeros(batch.len(), 2 * d);
        let mut slots = Vec::with_capacity(batch.len());
        for (r, s) in batch.iter().enumerate() {
            let (su, eu) = store.resolve(s.user_key())?;
            let (si, ei) = store.resolve(s.item_key())?;
            let row = x.row_mut(r);
            row[..d].copy_from_slice(eu);
            row[d..].copy_from_slice(ei);
            slots.push((su, si));
        }
        Ok((x, slots))
    }

    /// `ŷ` for rows of concatenated `[e_u ; e_i]`.
    pub fn predict_inputs(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        check_dim("model input width", 2 * self.dim, inputs.cols())?;
        let z = self.mlp.infer_batch(inputs)?;
        Ok(z.data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn predict(&self, store: &EmbeddingStore, user: IdKey, item: IdKey) -> Result<f64> {
        let (_, eu) = store.resolve(user)?;
        let (_, ei) = store.resolve(item)?;
        let mut row = eu.to_vec();
        row.extend_from_slice(ei);
        let x = Matrix::new(1, row.len(), row)?;
        Ok(self.predict_inputs(&x)?[0])
    }

    /// Predictions under the current assignment; mutates nothing.
    pub fn evaluate_batch(&self, store: &EmbeddingStore, batch: &[Interaction]) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(Error::Empty("evaluation batch"));
        }
        let labels = labels_of(batch)?;
        let (x, _) = self.gather(store, batch)?;
        Ok(Evaluation {
            predictions: self.predict_inputs(&x)?,
            labels,
        })
    }

    /// Per-sample squared errors if each id sat at `position_of(id)` instead
    /// of its current position. The store is not modified.
    pub fn squared_errors_at<F>(&self, store: &EmbeddingStore, batch: &[Interaction], position_of: F) -> Result<Vec<f64>>
    where
        F: Fn(IdKey) -> usize,
    {
        if batch.is_empty() {
            return Err(Error::Empty("evaluation batch"));
        }
        let labels = labels_of(batch)?;
        let d = self.dim;
        let mut x = Matrix::zeros(batch.len(), 2 * d);
        for (r, s) in batch.iter().enumerate() {
            let (u, i) = (s.user_key(), s.item_key());
            let row = x.row_mut(r);
            row[..d].copy_from_slice(store.vector_at(u, position_of(u))?);
            row[d..].copy_from_slice(store.vector_at(i, position_of(i))?);
        }
        Ok(self
            .predict_inputs(&x)?
            .iter()
            .zip(&labels)
            .map(|(p, y)| (p - y) * (p - y))
            .collect())
    }

    /// Loss and gradients for `MSE = (1/N)·Σ(ŷ − y)²` without applying them.
    pub fn gradients(&self, store: &EmbeddingStore, batch: &[Interaction]) -> Result<ModelGrads> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let labels = labels_of(batch)?;
        let (x, slots) = self.gather(store, batch)?;
        let (z, caches) = self.mlp.forward_batch(&x)?;
        let n = batch.len() as f64;
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut dz = Matrix::zeros(batch.len(), 1);
        for (r, (&zr, y)) in z.data().iter().zip(&labels).enumerate() {
            let p = sigmoid(zr);
            per_sample.push((p - y) * (p - y));
            dz.set(r, 0, 2.0 / n * (p - y) * p * (1.0 - p));
        }
        let mut layers = self.mlp.zero_grads();
        let dx = self
            .mlp
            .backward_batch(&caches, &dz, Some(&mut layers), true)?
            .expect("input gradient requested");
        let d = self.dim;
        let mut grads = SlotGradients::new(d);
        for (r, (s, (su, si))) in batch.iter().zip(&slots).enumerate() {
            let row = dx.row(r);
            grads.add(s.user_key().field, *su, &row[..d])?;
            grads.add(s.item_key().field, *si, &row[d..])?;
        }
        let mean = per_sample.iter().sum::<f64>() / n;
        Ok(ModelGrads {
            loss: BatchLoss { mean, per_sample },
            layers,
            slots: grads,
        })
    }

    /// One Adam step on the MLP and on every embedding slot the batch touched.
    pub fn train_batch(&mut self, store: &mut EmbeddingStore, batch: &[Interaction]) -> Result<BatchLoss> {
        let g = self.gradients(store, batch)?;
        self.opt.step(&mut self.mlp, &g.layers)?;
        store.apply_gradients(&g.slots)?;
        Ok(g.loss)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.dim);
        write_mlp(w, &self.mlp);
        write_optimizer(w, &self.opt);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let dim = r.usize()?;
        let mlp = read_mlp(r)?;
        check_dim("model input width", 2 * dim, mlp.in_dim())?;
        Ok(Self {
            dim,
            mlp,
            opt: read_optimizer(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::embedding::{Action, Field, StoreConfig};
    use crate::nn::gradcheck::{numeric_gradient, relative_error};

    fn setup(dim: usize, hidden: Vec<usize>) -> (RecModel, EmbeddingStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RecModel::new(
            &RecModelConfig {
                hidden,
                adam: AdamConfig::with_lr(0.01),
            },
            dim,
            &mut rng,
        )
        .unwrap();
        let store = EmbeddingStore::new(StoreConfig {
            dim,
            k_user: 1,
            k_item: 2,
            history_capacity: 30,
            adam: AdamConfig::with_lr(0.01),
            seed: 2,
        })
        .unwrap();
        (model, store)
    }

    fn ix(user: u64, item: u64, label: u8) -> Interaction {
        Interaction {
            user,
            item,
            label,
            timestamp: 0,
        }
    }

    fn observe(store: &mut EmbeddingStore, batch: &[Interaction]) {
        for x in batch {
            store.observe(x.user_key());
            store.observe(x.item_key());
        }
    }

    fn zero_mlp(model: &mut RecModel) {
        for l in model.mlp_mut().layers_mut() {
            l.weights_mut().fill(0.0);
            l.bias_mut().iter_mut().for_each(|b| *b = 0.0);
        }
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let (mut model, mut store) = setup(4, vec![8, 8]);
        zero_mlp(&mut model);
        let batch = [ix(0, 0, 1), ix(3, 9, 0)];
        observe(&mut store, &batch);
        for x in &batch {
            assert_eq!(model.predict(&store, x.user_key(), x.item_key()).unwrap(), 0.5);
        }
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let (model, store) = setup(4, vec![8]);
        assert!(matches!(
            model.predict(&store, IdKey::user(1), IdKey::item(1)),
            Err(Error::UnknownId(_))
        ));
        assert!(model.evaluate_batch(&store, &[]).is_err());
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let (model, mut store) = setup(4, vec![8]);
        let batch = [ix(0, 0, 1), ix(1, 2, 0), ix(0, 2, 1)];
        observe(&mut store, &batch);
        let before = (model.clone(), store.clone());
        let a = model.evaluate_batch(&store, &batch).unwrap();
        let b = model.evaluate_batch(&store, &batch).unwrap();
        assert_eq!(a, b);
        assert_eq!((model, store), before);
    }

    #[test]
    fn accuracy_threshold_is_strict() {
        let e = Evaluation {
            predictions: vec![0.9, 0.1],
            labels: vec![1.0, 0.0],
        };
        assert_eq!(e.accuracy(), 1.0);
        let e = Evaluation {
            predictions: vec![0.5 + 1e-9, 0.5],
            labels: vec![1.0, 1.0],
        };
        assert_eq!(e.accuracy(), 0.5);
    }

    #[test]
    fn exact_fit_gives_zero_loss_and_no_movement() {
        let (mut model, mut store) = setup(4, vec![8]);
        zero_mlp(&mut model);
        // σ(40) rounds to exactly 1 and its derivative to exactly 0.
        let last = model.mlp_mut().layers_mut().last_mut().unwrap();
        last.bias_mut()[0] = 40.0;
        let batch = [ix(0, 0, 1), ix(1, 1, 1)];
        observe(&mut store, &batch);
        let before = (model.clone(), store.clone());
        let loss = model.train_batch(&mut store, &batch).unwrap();
        assert_eq!(loss.mean, 0.0);
        assert_eq!(model.mlp(), before.0.mlp());
        assert_eq!(
            store.resolve(IdKey::user(0)).unwrap().1,
            before.1.resolve(IdKey::user(0)).unwrap().1
        );
    }

    #[test]
    fn memorizes_a_single_example() {
        let (mut model, mut store) = setup(4, vec![16, 16]);
        let batch = [ix(0, 0, 1)];
        observe(&mut store, &batch);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = model.train_batch(&mut store, &batch).unwrap().mean;
        }
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn shared_slot_gradient_is_sum_of_per_sample_gradients() {
        let (model, mut store) = setup(4, vec![8]);
        let batch = [ix(0, 0, 1), ix(1, 1, 0)];
        observe(&mut store, &batch);
        let joint = model.gradients(&store, &batch).unwrap();
        // Each single-sample batch is scaled by 1/1 instead of 1/2.
        let mut summed = vec![0.0; 4];
        for x in &batch {
            let g = model.gradients(&store, std::slice::from_ref(x)).unwrap();
            for (s, v) in summed.iter_mut().zip(g.slots.get(Field::User, Slot::Shared(1)).unwrap()) {
                *s += v / 2.0;
            }
        }
        let got = joint.slots.get(Field::User, Slot::Shared(1)).unwrap();
        for (a, b) in got.iter().zip(&summed) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Loss as a function of every trainable scalar touched by `batch`: MLP
    /// parameters followed by the listed embedding slots.
    fn flat_loss(
        model: &RecModel,
        store: &EmbeddingStore,
        slots: &[(Field, Slot)],
        batch: &[Interaction],
        params: &[f64],
    ) -> f64 {
        let mut m = model.clone();
        let mut s = store.clone();
        let mut rest = params;
        for l in m.mlp_mut().layers_mut() {
            let nw = l.weights().data().len();
            l.weights_mut().data_mut().copy_from_slice(&rest[..nw]);
            let nb = l.bias().len();
            l.bias_mut().copy_from_slice(&rest[nw..nw + nb]);
            rest = &rest[nw + nb..];
        }
        for (f, slot) in slots {
            let v = s.slot_vector_mut(*f, *slot).unwrap();
            let d = v.len();
            v.copy_from_slice(&rest[..d]);
            rest = &rest[d..];
        }
        m.evaluate_batch(&s, batch).unwrap().mse()
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (model, mut store) = setup(4, vec![8, 8]);
        let batch = [ix(0, 0, 1), ix(1, 1, 0)];
        observe(&mut store, &batch);
        // Distinct slots: a unique user vector, the shared user level, two item levels.
        store.apply_action(IdKey::user(0), Action::Ascend).unwrap();
        store.apply_action(IdKey::item(1), Action::Ascend).unwrap();
        let slots: Vec<(Field, Slot)> = [IdKey::user(0), IdKey::user(1), IdKey::item(0), IdKey::item(1)]
            .iter()
            .map(|id| (id.field, store.slot(*id).unwrap()))
            .collect();
        let g = model.gradients(&store, &batch).unwrap();
        let mut analytic = Vec::new();
        for l in &g.layers {
            analytic.extend_from_slice(l.weights.data());
            analytic.extend_from_slice(&l.bias);
        }
        let mut params: Vec<f64> = model.mlp().params_iter().copied().collect();
        for (f, slot) in &slots {
            analytic.extend_from_slice(g.slots.get(*f, *slot).unwrap());
            params.extend_from_slice(store.slot_vector(*f, *slot).unwrap());
        }
        let numeric = numeric_gradient(|p| flat_loss(&model, &store, &slots, &batch, p), &params, 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn what_if_errors_match_committed_positions() {
        let (model, mut store) = setup(4, vec![8]);
        let batch = [ix(0, 0, 1), ix(1, 1, 0)];
        observe(&mut store, &batch);
        let preview = model
            .squared_errors_at(&store, &batch, |id| if id == IdKey::item(1) { 2 } else { 1 })
            .unwrap();
        let mut moved = store.clone();
        moved.apply_action(IdKey::item(1), Action::Ascend).unwrap();
        let committed = model.evaluate_batch(&moved, &batch).unwrap().squared_errors();
        assert_eq!(preview, committed);
        assert_eq!(store.state(IdKey::item(1)).unwrap().position, 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _) = setup(4, vec![8]);
        let mut w = Writer::new();
        model.write(&mut w);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes).unwrap();
        assert_eq!(RecModel::read(&mut r).unwrap(), model);
        r.finish().unwrap();
    }
}
