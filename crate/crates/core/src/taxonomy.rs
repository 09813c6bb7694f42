//! Two-level class hierarchies: super-classes partitioning finer classes.
//!
//! Documents are JSON objects of the form
//!
//! ```json
//! {
//!   "name": "example",
//!   "supers": [
//!     { "name": "A", "finers": ["x", "y"] },
//!     { "name": "B", "finers": ["z"] }
//!   ],
//!   "finer_order": ["x", "z", "y"]
//! }
//! ```
//!
//! Super indices follow document order. Finer indices follow document order
//! too, unless the optional `finer_order` permutation is given; the CIFAR-100
//! builtin uses it so finer indices equal the dataset's fine-label bytes.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::error::{Error, Result};

const CIFAR100_DOC: &str = include_str!("../taxonomies/cifar100.json");
const COCO_DOC: &str = include_str!("../taxonomies/coco.json");

/// Names the builtin CIFAR-100 taxonomy uses where the printed grouping table
/// differs: `(table name, dataset name)`. The dataset spelling is
/// authoritative so labels join against the binary files.
pub const CIFAR100_NAME_ALIASES: &[(&str, &str)] = &[
    ("medium-sized mammals", "medium mammals"),
    ("orchids", "orchid"),
    ("poppies", "poppy"),
    ("roses", "rose"),
    ("sunflowers", "sunflower"),
    ("tulips", "tulip"),
    ("bottles", "bottle"),
    ("bowls", "bowl"),
    ("cans", "can"),
    ("cups", "cup"),
    ("plates", "plate"),
    ("apples", "apple"),
    ("mushrooms", "mushroom"),
    ("oranges", "orange"),
    ("pears", "pear"),
    ("sweet peppers", "sweet pepper"),
    ("computer keyboard", "keyboard"),
    ("maple", "maple tree"),
    ("oak", "oak tree"),
    ("palm", "palm tree"),
    ("pine", "pine tree"),
    ("willow", "willow tree"),
    ("lawn-mower", "lawn mower"),
];

/// A validated two-level hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    name: String,
    super_names: Vec<String>,
    finer_names: Vec<String>,
    parent: Vec<usize>,
    members: Vec<Vec<usize>>,
    super_index: HashMap<String, usize>,
    finer_index: HashMap<String, usize>,
}

impl Taxonomy {
    /// Builds a taxonomy from `(super, finers)` groups.
    pub fn new(
        name: impl Into<String>,
        groups: Vec<(String, Vec<String>)>,
        finer_order: Option<Vec<String>>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::validation("taxonomy has no super-classes"));
        }
        let mut super_index = HashMap::new();
        let mut owner: HashMap<String, usize> = HashMap::new();
        let mut grouped_finers = Vec::new();
        for (s, (super_name, finers)) in groups.iter().enumerate() {
            if super_index.insert(super_name.clone(), s).is_some() {
                return Err(Error::validation(format!(
                    "duplicate super-class name \"{super_name}\""
                )));
            }
            if finers.is_empty() {
                return Err(Error::validation(format!(
                    "super-class \"{super_name}\" has no finer classes"
                )));
            }
            for f in finers {
                if let Some(&prev) = owner.get(f) {
                    return Err(Error::validation(if prev == s {
                        format!("\"{f}\" listed twice under super-class \"{super_name}\"")
                    } else {
                        format!("\"{f}\" assigned to two super-classes")
                    }));
                }
                owner.insert(f.clone(), s);
                grouped_finers.push(f.clone());
            }
        }

        let finer_names = match finer_order {
            None => grouped_finers,
            Some(order) => {
                let mut seen = HashMap::new();
                for (i, f) in order.iter().enumerate() {
                    if !owner.contains_key(f) {
                        return Err(Error::validation(format!(
                            "finer_order entry \"{f}\" is not listed under any super-class"
                        )));
                    }
                    if seen.insert(f.clone(), i).is_some() {
                        return Err(Error::validation(format!(
                            "finer_order lists \"{f}\" twice"
                        )));
                    }
                }
                if order.len() != owner.len() {
                    let missing = grouped_finers
                        .iter()
                        .find(|f| !seen.contains_key(*f))
                        .cloned()
                        .unwrap_or_default();
                    return Err(Error::validation(format!(
                        "finer_order is missing \"{missing}\""
                    )));
                }
                order
            }
        };

        let finer_index: HashMap<String, usize> = finer_names
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        let parent: Vec<usize> = finer_names.iter().map(|f| owner[f]).collect();
        let mut members = vec![Vec::new(); groups.len()];
        for (f, &s) in parent.iter().enumerate() {
            members[s].push(f);
        }
        Ok(Self {
            name: name.into(),
            super_names: groups.into_iter().map(|(s, _)| s).collect(),
            finer_names,
            parent,
            members,
            super_index,
            finer_index,
        })
    }

    /// Parses and validates a taxonomy document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| {
            Error::validation(format!(
                "taxonomy document is not valid JSON (line {}, column {}): {e}",
                e.line(),
                e.column()
            ))
        })?;
        let name = doc
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("unnamed")
            .to_string();
        let supers = doc
            .get("supers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::validation("taxonomy document needs a \"supers\" array"))?;
        let mut groups = Vec::with_capacity(supers.len());
        for (i, entry) in supers.iter().enumerate() {
            let super_name = entry
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::validation(format!("super-class #{i} has no \"name\"")))?;
            let finers = entry.get("finers").and_then(Value::as_array).ok_or_else(|| {
                Error::validation(format!("super-class \"{super_name}\" has no \"finers\" list"))
            })?;
            let mut names = Vec::with_capacity(finers.len());
            for f in finers {
                match f {
                    Value::String(s) => names.push(s.clone()),
                    Value::Object(_) | Value::Array(_) => {
                        return Err(Error::validation(format!(
                            "super-class \"{super_name}\" nests a deeper level; only two-level taxonomies are supported"
                        )))
                    }
                    other => {
                        return Err(Error::validation(format!(
                            "super-class \"{super_name}\" has a non-string finer entry {other}"
                        )))
                    }
                }
            }
            groups.push((super_name.to_string(), names));
        }
        let finer_order = match doc.get("finer_order") {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .map(|v| {
                        v.as_str().map(str::to_string).ok_or_else(|| {
                            Error::validation("finer_order must be a list of names")
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(_) => return Err(Error::validation("finer_order must be a list of names")),
        };
        Self::new(name, groups, finer_order)
    }

    /// Serializes back to the document format.
    pub fn to_json(&self) -> String {
        let supers: Vec<Value> = self
            .members
            .iter()
            .enumerate()
            .map(|(s, m)| {
                json!({
                    "name": self.super_names[s],
                    "finers": m.iter().map(|&f| self.finer_names[f].as_str()).collect::<Vec<_>>(),
                })
            })
            .collect();
        let grouped: Vec<usize> = self.members.iter().flatten().copied().collect();
        let mut doc = json!({ "name": self.name, "supers": supers });
        if grouped.iter().enumerate().any(|(i, &f)| i != f) {
            doc["finer_order"] = json!(self.finer_names);
        }
        serde_json::to_string_pretty(&doc).expect("json value serializes")
    }

    pub fn cifar100() -> Self {
        Self::from_json(CIFAR100_DOC).expect("builtin CIFAR-100 taxonomy is valid")
    }

    pub fn coco() -> Self {
        Self::from_json(COCO_DOC).expect("builtin COCO taxonomy is valid")
    }

    /// Looks up a builtin by name (`cifar100` or `coco`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cifar100" | "cifar-100" => Ok(Self::cifar100()),
            "coco" | "mscoco" => Ok(Self::coco()),
            other => Err(Error::lookup(format!(
                "unknown builtin taxonomy \"{other}\" (expected cifar100 or coco)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_super(&self) -> usize {
        self.super_names.len()
    }

    pub fn num_finer(&self) -> usize {
        self.finer_names.len()
    }

    pub fn super_names(&self) -> &[String] {
        &self.super_names
    }

    pub fn finer_names(&self) -> &[String] {
        &self.finer_names
    }

    pub fn super_name(&self, s: usize) -> Option<&str> {
        self.super_names.get(s).map(String::as_str)
    }

    pub fn finer_name(&self, f: usize) -> Option<&str> {
        self.finer_names.get(f).map(String::as_str)
    }

    pub fn super_index(&self, name: &str) -> Result<usize> {
        self.super_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::lookup(format!("unknown super-class \"{name}\"")))
    }

    pub fn finer_index(&self, name: &str) -> Result<usize> {
        self.finer_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::lookup(format!("unknown finer class \"{name}\"")))
    }

    pub fn finer_to_super(&self, finer: usize) -> Result<usize> {
        self.parent.get(finer).copied().ok_or_else(|| {
            Error::lookup(format!(
                "finer index {finer} out of range for {} classes",
                self.num_finer()
            ))
        })
    }

    pub fn finer_to_super_by_name(&self, finer: &str) -> Result<usize> {
        self.finer_index(finer).map(|f| self.parent[f])
    }

    /// Finer indices under `super_id`, in finer-index order.
    pub fn members_of(&self, super_id: usize) -> Result<&[usize]> {
        self.members.get(super_id).map(Vec::as_slice).ok_or_else(|| {
            Error::lookup(format!(
                "super index {super_id} out of range for {} super-classes",
                self.num_super()
            ))
        })
    }

    /// Parent table indexed by finer class.
    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    /// Elementwise parent lookup.
    pub fn derive_super_labels(&self, finer_labels: &[usize]) -> Result<Vec<usize>> {
        finer_labels
            .iter()
            .enumerate()
            .map(|(pos, &f)| {
                self.parent.get(f).copied().ok_or_else(|| {
                    Error::validation(format!(
                        "finer label {f} at position {pos} out of range for {} classes",
                        self.num_finer()
                    ))
                })
            })
            .collect()
    }

    /// Restricts to the named super-classes. Returns the sub-taxonomy (indices
    /// dense, in this taxonomy's order) and the map old finer index → new index.
    pub fn restrict(&self, supers: &[&str]) -> Result<(Self, HashMap<usize, usize>)> {
        let mut chosen = supers
            .iter()
            .map(|s| self.super_index(s))
            .collect::<Result<Vec<_>>>()?;
        chosen.sort_unstable();
        chosen.dedup();
        let groups: Vec<(String, Vec<String>)> = chosen
            .iter()
            .map(|&s| {
                (
                    self.super_names[s].clone(),
                    self.members[s].iter().map(|&f| self.finer_names[f].clone()).collect(),
                )
            })
            .collect();
        let kept: Vec<usize> = (0..self.num_finer())
            .filter(|f| chosen.contains(&self.parent[*f]))
            .collect();
        let order = kept.iter().map(|&f| self.finer_names[f].clone()).collect();
        let sub = Self::new(format!("{}-subset", self.name), groups, Some(order))?;
        let remap = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        Ok((sub, remap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abz() -> Taxonomy {
        Taxonomy::new(
            "t",
            vec![
                ("A".into(), vec!["x".into(), "y".into()]),
                ("B".into(), vec!["z".into()]),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn direct_transcription() {
        let t = abz();
        assert_eq!((t.num_super(), t.num_finer()), (2, 3));
        assert_eq!(t.parents(), &[0, 0, 1]);
        assert_eq!(t.finer_to_super_by_name("z").unwrap(), 1);
    }

    #[test]
    fn finer_under_two_supers_is_rejected() {
        let doc = r#"{"supers":[{"name":"A","finers":["x"]},{"name":"B","finers":["x"]}]}"#;
        let err = Taxonomy::from_json(doc).unwrap_err().to_string();
        assert!(err.contains("\"x\" assigned to two super-classes"), "{err}");
    }

    #[test]
    fn empty_and_duplicate_supers_are_rejected() {
        let doc = r#"{"supers":[{"name":"A","finers":[]}]}"#;
        assert!(Taxonomy::from_json(doc).unwrap_err().to_string().contains("\"A\""));
        let doc = r#"{"supers":[{"name":"A","finers":["x"]},{"name":"A","finers":["y"]}]}"#;
        assert!(Taxonomy::from_json(doc).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn deeper_trees_are_rejected() {
        let doc = r#"{"supers":[{"name":"A","finers":[{"name":"x","finers":["p"]}]}]}"#;
        let err = Taxonomy::from_json(doc).unwrap_err().to_string();
        assert!(err.contains("two-level"), "{err}");
    }

    #[test]
    fn finer_order_must_be_a_permutation() {
        let doc = r#"{"supers":[{"name":"A","finers":["x","y"]}],"finer_order":["y"]}"#;
        assert!(Taxonomy::from_json(doc).is_err());
        let doc = r#"{"supers":[{"name":"A","finers":["x","y"]}],"finer_order":["y","q"]}"#;
        assert!(Taxonomy::from_json(doc).is_err());
    }

    #[test]
    fn lookups() {
        let t = Taxonomy::cifar100();
        let beaver = t.finer_to_super_by_name("beaver").unwrap();
        assert_eq!(t.super_name(beaver), Some("aquatic mammals"));
        assert!(matches!(t.finer_to_super_by_name("dragon"), Err(Error::Lookup(_))));
        assert!(t.members_of(20).is_err());

        let c = Taxonomy::coco();
        let bike = c.finer_to_super_by_name("bicycle").unwrap();
        assert_eq!(c.super_name(bike), Some("vehicle"));
        let person = c.super_index("person").unwrap();
        let m = c.members_of(person).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(c.finer_name(m[0]), Some("person"));
    }

    #[test]
    fn derive_super_labels_elementwise() {
        let t = abz();
        assert_eq!(t.derive_super_labels(&[0, 2, 1]).unwrap(), vec![0, 1, 0]);
        assert!(t.derive_super_labels(&[]).unwrap().is_empty());
        let err = t.derive_super_labels(&[0, 3]).unwrap_err().to_string();
        assert!(err.contains("position 1"), "{err}");
    }

    #[test]
    fn json_round_trip_preserves_indices() {
        for t in [Taxonomy::cifar100(), Taxonomy::coco(), abz()] {
            let back = Taxonomy::from_json(&t.to_json()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn restrict_keeps_dense_order() {
        let t = Taxonomy::cifar100();
        let (sub, remap) = t.restrict(&["vehicles 1", "people"]).unwrap();
        assert_eq!((sub.num_super(), sub.num_finer()), (2, 10));
        assert_eq!(sub.super_names(), &["people", "vehicles 1"]);
        for (&old, &new) in &remap {
            assert_eq!(sub.finer_name(new), t.finer_name(old));
        }
        assert!(t.restrict(&["dragons"]).is_err());
    }
}
