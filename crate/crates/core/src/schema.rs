//! Attribute schema: the attribute list, their class counts and the order in
//! which the LSTM sweeps them.
//!
//! Text format (`schema.txt`), UTF-8, `\n` line endings:
//!
//! ```text
//! # comment lines start with '#'
//! order<TAB><policy>
//! <name><TAB><class_count><TAB><sweep_position>
//! ...
//! ```
//!
//! `<policy>` is `top_down`, `fine_abstract` or `custom`. Attribute lines are
//! in label order: the k-th attribute line describes the k-th attribute column
//! of `labels.tsv`. `sweep_position` is the step at which the LSTM visits the
//! attribute; the positions form a permutation of `0..L`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderPolicy {
    TopDown,
    FineAbstract,
    Custom,
}

impl OrderPolicy {
    pub fn name(self) -> &'static str {
        match self {
            OrderPolicy::TopDown => "top_down",
            OrderPolicy::FineAbstract => "fine_abstract",
            OrderPolicy::Custom => "custom",
        }
    }
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_down" => Ok(OrderPolicy::TopDown),
            "fine_abstract" => Ok(OrderPolicy::FineAbstract),
            "custom" => Ok(OrderPolicy::Custom),
            _ => Err(Error::Config(format!("unknown order policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    /// `sweep[t]` is the label index of the attribute visited at step `t`.
    sweep: Vec<usize>,
    policy: OrderPolicy,
}

/// Default pedestrian attributes in label (top-down) order, with the
/// position each takes in the fine-to-abstract sweep.
const PEDESTRIAN: [(&str, usize, usize); 12] = [
    ("hat", 2, 3),
    ("hair_length", 2, 7),
    ("age", 4, 10),
    ("gender", 2, 11),
    ("upper_color", 9, 8),
    ("sleeve_length", 2, 4),
    ("backpack", 2, 2),
    ("bag", 2, 1),
    ("handbag", 2, 0),
    ("lower_color", 10, 9),
    ("lower_length", 2, 5),
    ("lower_type", 2, 6),
];

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>, sweep: Vec<usize>, policy: OrderPolicy) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Validation("schema needs at least one attribute".into()));
        }
        if let Some(a) = attributes.iter().find(|a| a.classes < 2) {
            return Err(Error::Validation(format!(
                "attribute {} has {} classes, at least 2 required",
                a.name, a.classes
            )));
        }
        let mut seen = vec![false; attributes.len()];
        if sweep.len() != attributes.len() {
            return Err(Error::Validation(format!(
                "sweep order has {} entries for {} attributes",
                sweep.len(),
                attributes.len()
            )));
        }
        for &i in &sweep {
            if i >= attributes.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("sweep order {sweep:?} is not a permutation")));
            }
        }
        Ok(AttributeSchema {
            attributes,
            sweep,
            policy,
        })
    }

    /// Schema in label order swept top to bottom.
    pub fn in_order(attributes: Vec<Attribute>) -> Result<Self> {
        let sweep = (0..attributes.len()).collect();
        Self::new(attributes, sweep, OrderPolicy::TopDown)
    }

    /// The twelve-attribute pedestrian schema with the given sweep policy.
    pub fn pedestrian(policy: OrderPolicy) -> Self {
        let attributes = PEDESTRIAN
            .iter()
            .map(|&(name, classes, _)| Attribute {
                name: name.to_string(),
                classes,
            })
            .collect();
        let sweep = match policy {
            OrderPolicy::TopDown | OrderPolicy::Custom => (0..PEDESTRIAN.len()).collect(),
            OrderPolicy::FineAbstract => {
                let mut s = vec![0; PEDESTRIAN.len()];
                for (label, &(_, _, pos)) in PEDESTRIAN.iter().enumerate() {
                    s[pos] = label;
                }
                s
            }
        };
        Self::new(attributes, sweep, policy).expect("builtin schema is valid")
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute(&self, label_index: usize) -> &Attribute {
        &self.attributes[label_index]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.classes).collect()
    }

    pub fn policy(&self) -> OrderPolicy {
        self.policy
    }

    pub fn sweep(&self) -> &[usize] {
        &self.sweep
    }

    /// `position[label] = step` (inverse of the sweep permutation).
    pub fn positions(&self) -> Vec<usize> {
        invert(&self.sweep)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Reorders the sweep without touching label order.
    pub fn with_sweep(&self, sweep: Vec<usize>, policy: OrderPolicy) -> Result<Self> {
        Self::new(self.attributes.clone(), sweep, policy)
    }

    /// Checks that one sample's labels fit this schema.
    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} attribute labels for a schema of {}",
                labels.len(),
                self.len()
            )));
        }
        for (a, &l) in self.attributes.iter().zip(labels) {
            if l >= a.classes {
                return Err(Error::Label {
                    label: l,
                    classes: a.classes,
                });
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# attribute schema: name, class count, sweep position\n");
        let _ = writeln!(out, "order\t{}", self.policy.name());
        let pos = self.positions();
        for (i, a) in self.attributes.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", a.name, a.classes, pos[i]);
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, detail: String| Error::Parse {
            file: source.to_string(),
            line,
            detail,
        };
        let mut policy = None;
        let mut attributes = Vec::new();
        let mut positions = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields[0] == "order" {
                if fields.len() != 2 {
                    return Err(perr(i + 1, "order line needs exactly one policy".into()));
                }
                policy = Some(fields[1].parse().map_err(|e: Error| perr(i + 1, e.to_string()))?);
                continue;
            }
            if fields.len() != 3 {
                return Err(perr(i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let classes = fields[1]
                .parse()
                .map_err(|_| perr(i + 1, format!("bad class count {:?}", fields[1])))?;
            let pos: usize = fields[2]
                .parse()
                .map_err(|_| perr(i + 1, format!("bad sweep position {:?}", fields[2])))?;
            attributes.push(Attribute {
                name: fields[0].to_string(),
                classes,
            });
            positions.push(pos);
        }
        let policy = policy.unwrap_or(OrderPolicy::Custom);
        if positions.iter().any(|&p| p >= positions.len()) {
            return Err(Error::Validation(format!("{source}: sweep positions {positions:?} are not a permutation")));
        }
        let mut sweep = vec![usize::MAX; positions.len()];
        for (label, &p) in positions.iter().enumerate() {
            sweep[p] = label;
        }
        if sweep.contains(&usize::MAX) {
            return Err(Error::Validation(format!("{source}: sweep positions {positions:?} are not a permutation")));
        }
        Self::new(attributes, sweep, policy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
