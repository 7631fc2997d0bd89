//! Adapter stacks over a frozen base: a domain slot and a downstream slot,
//! each with a freeze flag, plus the classification head, and the six
//! fine-tuning variants built from them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{BaseModel, ClassifierHead, ModelConfig};
use crate::tensor::{prefixed, prefixed_mut, Float, HasParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Domain,
    Downstream,
}

impl SlotKind {
    /// Parameter-name prefix of the slot.
    pub fn prefix(self) -> &'static str {
        match self {
            SlotKind::Domain => "domain",
            SlotKind::Downstream => "downstream",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub adapter: Adapter<T>,
    pub frozen: bool,
}

impl<T: Float> Slot<T> {
    pub fn new(mut adapter: Adapter<T>, frozen: bool) -> Self {
        adapter.set_trainable(!frozen);
        Self { adapter, frozen }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack<T> {
    pub domain: Option<Slot<T>>,
    pub downstream: Option<Slot<T>>,
    pub head: Option<ClassifierHead<T>>,
}

impl<T: Float> AdapterStack<T> {
    pub fn empty() -> Self {
        Self {
            domain: None,
            downstream: None,
            head: None,
        }
    }

    /// A single trainable adapter in the domain slot, as used for
    /// domain-adaptive pretraining.
    pub fn pretraining(adapter: Adapter<T>) -> Self {
        Self {
            domain: Some(Slot::new(adapter, false)),
            downstream: None,
            head: None,
        }
    }

    /// Attached adapters, domain slot first.
    pub fn adapters(&self) -> Vec<(SlotKind, &Adapter<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &self.domain {
            out.push((SlotKind::Domain, &s.adapter));
        }
        if let Some(s) = &self.downstream {
            out.push((SlotKind::Downstream, &s.adapter));
        }
        out
    }

    pub fn slot(&self, kind: SlotKind) -> Option<&Slot<T>> {
        match kind {
            SlotKind::Domain => self.domain.as_ref(),
            SlotKind::Downstream => self.downstream.as_ref(),
        }
    }

    pub fn head(&self) -> Result<&ClassifierHead<T>> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Config("stack has no classification head".into()))
    }

    pub fn cast<U: Float>(&self) -> AdapterStack<U> {
        let slot = |s: &Slot<T>| Slot {
            adapter: s.adapter.cast(),
            frozen: s.frozen,
        };
        AdapterStack {
            domain: self.domain.as_ref().map(slot),
            downstream: self.downstream.as_ref().map(slot),
            head: self.head.as_ref().map(ClassifierHead::cast),
        }
    }

    /// Names of every parameter that receives gradient.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }
}

impl<T: Float> HasParams<T> for AdapterStack<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (kind, a) in self.adapters() {
            out.extend(prefixed(kind.prefix(), a.params()));
        }
        if let Some(h) = &self.head {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.domain {
            out.extend(prefixed_mut(
                SlotKind::Domain.prefix(),
                s.adapter.params_mut(),
            ));
        }
        if let Some(s) = &mut self.downstream {
            out.extend(prefixed_mut(
                SlotKind::Downstream.prefix(),
                s.adapter.params_mut(),
            ));
        }
        if let Some(h) = &mut self.head {
            out.extend(h.params_mut());
        }
        out
    }
}

/// The six downstream configurations compared in the fine-tuning study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    HeadOnly,
    LoraOnly,
    DomainFrozen,
    DomainFrozenPlusDownstream,
    DomainTrainable,
    DomainTrainablePlusDownstream,
}

impl VariantSpec {
    pub const ALL: [VariantSpec; 6] = [
        VariantSpec::HeadOnly,
        VariantSpec::LoraOnly,
        VariantSpec::DomainFrozen,
        VariantSpec::DomainFrozenPlusDownstream,
        VariantSpec::DomainTrainable,
        VariantSpec::DomainTrainablePlusDownstream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantSpec::HeadOnly => "head_only",
            VariantSpec::LoraOnly => "lora_only",
            VariantSpec::DomainFrozen => "domain_frozen",
            VariantSpec::DomainFrozenPlusDownstream => "domain_frozen_plus_downstream",
            VariantSpec::DomainTrainable => "domain_trainable",
            VariantSpec::DomainTrainablePlusDownstream => "domain_trainable_plus_downstream",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// `Some(frozen)` when the variant uses a domain adapter.
    pub fn domain(self) -> Option<bool> {
        match self {
            VariantSpec::HeadOnly | VariantSpec::LoraOnly => None,
            VariantSpec::DomainFrozen | VariantSpec::DomainFrozenPlusDownstream => Some(true),
            VariantSpec::DomainTrainable | VariantSpec::DomainTrainablePlusDownstream => {
                Some(false)
            }
        }
    }

    pub fn uses_downstream(self) -> bool {
        matches!(
            self,
            VariantSpec::LoraOnly
                | VariantSpec::DomainFrozenPlusDownstream
                | VariantSpec::DomainTrainablePlusDownstream
        )
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Builds the stack for `spec`: attached adapters frozen or trainable as the
/// variant declares, a fresh trainable head, the base untouched.
pub fn compose<T: Float>(
    base: &BaseModel<T>,
    spec: VariantSpec,
    domain: Option<Adapter<T>>,
    downstream: Option<Adapter<T>>,
    task: &TaskSpec,
    head_seed: u64,
) -> Result<AdapterStack<T>> {
    let variant = spec.name();
    let domain = match (spec.domain(), domain) {
        (Some(frozen), Some(a)) => {
            a.check_compatible(&base.config)?;
            Some(Slot::new(a, frozen))
        }
        (Some(_), None) => {
            return Err(Error::MissingAdapter {
                variant,
                slot: "domain",
            })
        }
        (None, Some(_)) => {
            return Err(Error::UnexpectedAdapter {
                variant,
                slot: "domain",
            })
        }
        (None, None) => None,
    };
    let downstream = match (spec.uses_downstream(), downstream) {
        (true, Some(a)) => {
            a.check_compatible(&base.config)?;
            Some(Slot::new(a, false))
        }
        (true, None) => {
            return Err(Error::MissingAdapter {
                variant,
                slot: "downstream",
            })
        }
        (false, Some(_)) => {
            return Err(Error::UnexpectedAdapter {
                variant,
                slot: "downstream",
            })
        }
        (false, None) => None,
    };
    let head = ClassifierHead::init(task.clone(), base.config.d_model, head_seed);
    Ok(AdapterStack {
        domain,
        downstream,
        head: Some(head),
    })
}

/// Trainable parameter count and its share of the base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub count: u64,
    pub base: u64,
    pub fraction: f64,
}

impl TrainableCount {
    fn new(count: u64, model: &ModelConfig) -> Self {
        let base = model.param_count();
        Self {
            count,
            base,
            fraction: count as f64 / base as f64,
        }
    }
}

impl fmt::Display for TrainableCount {
    /// `8.4M (0.12%)` style.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({:.2}%)",
            human_count(self.count),
            self.fraction * 100.0
        )
    }
}

pub fn human_count(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.1}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

/// Counts the tensors of `params` that receive gradient.
pub fn count_trainable<T: Float, P: HasParams<T>>(
    params: &P,
    base: &BaseModel<T>,
) -> TrainableCount {
    TrainableCount::new(params.trainable_count() as u64, &base.config)
}

/// Count for a freshly initialised adapter, from shapes alone, so it works
/// for model sizes that are never materialised.
pub fn count_adapter(config: &AdapterConfig, model: &ModelConfig) -> TrainableCount {
    TrainableCount::new(config.param_count(model), model)
}

/// Folds a LoRA adapter into the base weights: `W ← W + (α/r)·(B·A)ᵀ` in
/// the input-major layout, per targeted projection.
pub fn merge_lora<T: Float>(base: &BaseModel<T>, adapter: &Adapter<T>) -> Result<BaseModel<T>> {
    let Adapter::Lora(lora) = adapter else {
        return Err(Error::NotMergeable(adapter.technique().name()));
    };
    adapter.check_compatible(&base.config)?;
    let mut merged = base.clone();
    for w in &lora.weights {
        let update = lora.dense_update(w.layer, w.projection)?;
        let target = merged.layers[w.layer].projection_mut(w.projection);
        for (x, u) in target.data_mut().iter_mut().zip(update) {
            *x = *x + u;
        }
    }
    Ok(merged)
}
