//! Generated corpora with known templates, for end-to-end checks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{AnomalyLabel, LogRecord};

/// Whitespace filter matching the generated messages.
pub const SYNTHETIC_FILTER: &str = "([ ])";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Number,
    Address,
    Block,
    User,
}

impl Slot {
    fn draw<R: Rng>(self, rng: &mut R) -> String {
        match self {
            Slot::Number => rng.random_range(1_000..10_000_000u32).to_string(),
            Slot::Address => format!(
                "10.{}.{}.{}:{}",
                rng.random_range(0..256u16),
                rng.random_range(0..256u16),
                rng.random_range(0..256u16),
                rng.random_range(1024..65536u32)
            ),
            Slot::Block => format!("blk_{}", rng.random::<i64>()),
            Slot::User => format!("user{:06x}", rng.random_range(0..0x100_0000u32)),
        }
    }
}

enum Part {
    Text(&'static str),
    Var(Slot),
}

use Part::{Text as T, Var as V};

const TEMPLATES: [&[Part]; 5] = [
    &[T("Receiving"), T("block"), V(Slot::Block), T("src"), V(Slot::Address), T("dest"), V(Slot::Address)],
    &[T("Connection"), T("closed"), T("by"), V(Slot::Address), T("after"), V(Slot::Number), T("ms")],
    &[T("session"), T("opened"), T("for"), T("user"), V(Slot::User), T("by"), T("uid"), V(Slot::Number)],
    &[T("Verification"), T("succeeded"), T("for"), V(Slot::Block)],
    &[T("PacketResponder"), V(Slot::Number), T("for"), T("block"), V(Slot::Block), T("terminating")],
];

/// Messages, the template each was drawn from and the true templates.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<LogRecord>,
    /// Truth templates with `<*>` slots, indexed by template number.
    pub templates: Vec<String>,
    pub assignment: Vec<usize>,
}

/// Number of distinct templates [`generate`] draws from.
pub const SYNTHETIC_TEMPLATES: usize = TEMPLATES.len();

/// `n` messages drawn uniformly from five fixed templates; every record
/// carries its event id and `<*>` template.
pub fn generate(n: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<String> = TEMPLATES
        .iter()
        .map(|parts| {
            parts
                .iter()
                .map(|p| match p {
                    T(s) => *s,
                    V(_) => "<*>",
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let ids: Vec<usize> = (0..TEMPLATES.len()).collect();
    let mut records = Vec::with_capacity(n);
    let mut assignment = Vec::with_capacity(n);
    for i in 0..n {
        let k = *ids.choose(&mut rng).expect("non-empty");
        let content = TEMPLATES[k]
            .iter()
            .map(|p| match p {
                T(s) => s.to_string(),
                V(slot) => slot.draw(&mut rng),
            })
            .collect::<Vec<_>>()
            .join(" ");
        records.push(LogRecord {
            truth_event_id: Some(format!("E{}", k + 1)),
            truth_template: Some(templates[k].clone()),
            anomaly_label: Some(AnomalyLabel::Normal),
            ..LogRecord::new(i as u64 + 1, content)
        });
        assignment.push(k);
    }
    SyntheticCorpus {
        records,
        templates,
        assignment,
    }
}
