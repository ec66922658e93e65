use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::fedalgos::accuracy;
use crate::models::{ensemble_forward, AggregatorKind, AggregatorSpec, LocalModel};
use crate::numerics::Tensor;

/// Frozen ensemble plus the aggregator that combines it.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub ensemble: Vec<LocalModel>,
    pub aggregator: AggregatorSpec,
}

impl GlobalModel {
    pub fn new(ensemble: Vec<LocalModel>, aggregator: AggregatorSpec) -> Result<Self> {
        let first = ensemble.first().ok_or_else(|| invalid("empty ensemble"))?;
        if aggregator.num_clients != ensemble.len() || aggregator.num_classes != first.num_classes() {
            return Err(invalid(format!(
                "aggregator expects {} models x {} classes, ensemble has {} x {}",
                aggregator.num_clients,
                aggregator.num_classes,
                ensemble.len(),
                first.num_classes()
            )));
        }
        Ok(Self { ensemble, aggregator })
    }

    pub fn num_classes(&self) -> usize {
        self.aggregator.num_classes
    }

    /// Aggregated logits; not defined for the vote aggregator.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.aggregator.logits(x, &ensemble_forward(&self.ensemble, x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.aggregator.predict(x, &ensemble_forward(&self.ensemble, x)?)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        Ok(accuracy(&self.predict(&data.features)?, &data.labels))
    }

    pub fn is_distillable(&self) -> bool {
        self.aggregator.kind != AggregatorKind::Vote
    }
}

/// Class for a single feature vector.
pub fn global_predict(gm: &GlobalModel, x: &[f32]) -> Result<usize> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(gm.predict(&t)?[0])
}
