use std::fmt;

/// Non-fatal conditions surfaced alongside a result.
///
/// Functions that can produce one both log it (at `warn` level) and return
/// it, so callers and tests can react without scraping logs.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Registration retained no pairs; training will rely on the overlap
    /// term alone.
    EmptyCorrespondences,
    /// Source vertices whose feature rows are all zero; they cannot be
    /// matched and are never retained.
    ZeroFeatureRows { count: usize },
    /// Inference requested at `requested` steps while the field was trained
    /// with `trained`; results degrade from twice the training steps on.
    StepsAboveGuidance { requested: usize, trained: usize },
    /// A correspondence-driven loss had no matched points in its batch and
    /// evaluated to zero.
    NoMatchedPoints { term: &'static str },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::EmptyCorrespondences => {
                write!(
                    f,
                    "no correspondences retained; training proceeds on the overlap term only"
                )
            }
            Warning::ZeroFeatureRows { count } => {
                write!(
                    f,
                    "{count} source vertices have all-zero features and stay unmatched"
                )
            }
            Warning::StepsAboveGuidance { requested, trained } => write!(
                f,
                "inferring with {requested} steps on a field trained with {trained}; \
                 keep the step count below {} for reliable results",
                2 * trained
            ),
            Warning::NoMatchedPoints { term } => {
                write!(f, "{term}: no matched points in batch, term set to 0")
            }
        }
    }
}

pub(crate) fn emit(w: Warning) -> Warning {
    log::warn!("{w}");
    w
}
