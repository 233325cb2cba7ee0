//! The prediction boundary. Every scenario output, expert output and
//! remote probe goes through [`Predictor`]; [`Tracked`] adds the
//! persistent cache and per-method call accounting.

pub mod cache;
pub mod expert;
pub mod features;
pub mod remote;
pub mod synthetic;

use std::sync::Arc;

use crate::error::Result;
use crate::metrics::CallLedger;
use crate::types::{ClassSpace, ProbVector, SampleView};

pub use cache::PredictionCache;
pub use expert::{ExpertRole, ToyExpert, TrainConfig};
pub use features::{FeatureExtractor, TagTable};
pub use remote::{RemoteConfig, RemotePredictor, Transport};
pub use synthetic::SyntheticModel;

/// A deterministic classifier over sample views.
pub trait Predictor: Send + Sync {
    /// Stable identity, part of every cache key.
    fn id(&self) -> &str;
    fn class_space(&self) -> &ClassSpace;
    /// A normalized distribution over the class space.
    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector>;
    /// Changes whenever the prompt a remote model sees changes.
    fn prompt_version(&self) -> &str {
        ""
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn class_space(&self) -> &ClassSpace {
        (**self).class_space()
    }
    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        (**self).predict(view)
    }
    fn prompt_version(&self) -> &str {
        (**self).prompt_version()
    }
}

/// Cache lookup in front of a predictor; misses are counted in the
/// ledger under `scope`.
pub struct Tracked<P> {
    inner: P,
    cache: Option<Arc<PredictionCache>>,
    ledger: CallLedger,
    scope: String,
}

impl<P: Predictor> Tracked<P> {
    pub fn new(
        inner: P,
        cache: Option<Arc<PredictionCache>>,
        ledger: CallLedger,
        scope: impl Into<String>,
    ) -> Self {
        Self {
            inner,
            cache,
            ledger,
            scope: scope.into(),
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    /// Same predictor and cache, counted under another scope.
    pub fn rescoped(&self, scope: impl Into<String>) -> Tracked<&P> {
        Tracked {
            inner: &self.inner,
            cache: self.cache.clone(),
            ledger: self.ledger.clone(),
            scope: scope.into(),
        }
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn class_space(&self) -> &ClassSpace {
        (**self).class_space()
    }
    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        (**self).predict(view)
    }
    fn prompt_version(&self) -> &str {
        (**self).prompt_version()
    }
}

impl<P: Predictor> Predictor for Tracked<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn class_space(&self) -> &ClassSpace {
        self.inner.class_space()
    }

    fn prompt_version(&self) -> &str {
        self.inner.prompt_version()
    }

    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        let key = self.cache.as_ref().map(|_| {
            cache::cache_key(
                self.inner.id(),
                &view.base().id,
                &view.fingerprint(),
                self.inner.prompt_version(),
            )
        });
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                return ProbVector::probabilities(hit);
            }
        }
        let out = self.inner.predict(view)?;
        self.ledger.record(&self.scope, 1);
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.insert(key, out.scores().to_vec())?;
        }
        Ok(out)
    }
}

/// Softmax over per-class logits.
pub(crate) fn softmax(logits: &[f64]) -> Result<ProbVector> {
    crate::types::normalize(&ProbVector::raw(logits.to_vec()))
}
