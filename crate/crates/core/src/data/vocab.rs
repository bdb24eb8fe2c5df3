use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{EntityId, RelationId};
use crate::error::{Error, Result};

pub const ENTITY_FILE: &str = "entities.tsv";
pub const RELATION_FILE: &str = "relations.tsv";

/// Label/id bookkeeping for entities and relations.
///
/// Entity ids: `0..E` for labels, then MASK = `E`, PAD = `E + 1`.
/// Relation ids: `0..R` forward, `R..2R` inverses (`r + R`), the self-loop
/// relation `2R`, then MASK = `2R + 1`, PAD = `2R + 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

/// Growing label maps used while ingesting statements.
#[derive(Clone, Debug, Default)]
pub struct VocabBuilder {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

fn intern(labels: &mut Vec<String>, index: &mut HashMap<String, usize>, label: &str) -> usize {
    if let Some(&id) = index.get(label) {
        return id;
    }
    let id = labels.len();
    labels.push(label.to_owned());
    index.insert(label.to_owned(), id);
    id
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, label: &str) -> EntityId {
        intern(&mut self.entities, &mut self.entity_index, label)
    }

    pub fn relation(&mut self, label: &str) -> RelationId {
        intern(&mut self.relations, &mut self.relation_index, label)
    }

    pub fn finish(self) -> Vocab {
        Vocab {
            entities: self.entities,
            relations: self.relations,
            entity_index: self.entity_index,
            relation_index: self.relation_index,
        }
    }
}

impl Vocab {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Forward relations only.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_mask(&self) -> EntityId {
        self.num_entities()
    }

    pub fn entity_pad(&self) -> EntityId {
        self.num_entities() + 1
    }

    /// Rows of an entity embedding table, specials included.
    pub fn entity_rows(&self) -> usize {
        self.num_entities() + 2
    }

    pub fn self_loop(&self) -> RelationId {
        2 * self.num_relations()
    }

    pub fn relation_mask(&self) -> RelationId {
        2 * self.num_relations() + 1
    }

    pub fn relation_pad(&self) -> RelationId {
        2 * self.num_relations() + 2
    }

    /// Rows of a relation embedding table, specials included.
    pub fn relation_rows(&self) -> usize {
        2 * self.num_relations() + 3
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        (self.num_relations()..2 * self.num_relations()).contains(&r)
    }

    /// Maps a forward relation to its inverse and back.
    pub fn inverse(&self, r: RelationId) -> RelationId {
        let n = self.num_relations();
        assert!(r < 2 * n, "relation {r} has no inverse");
        if r < n {
            r + n
        } else {
            r - n
        }
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_index.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label).copied()
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        match id {
            i if i < self.num_entities() => &self.entities[i],
            i if i == self.entity_mask() => "[MASK]",
            i if i == self.entity_pad() => "[PAD]",
            _ => panic!("entity id {id} out of range"),
        }
    }

    /// Label of any relation id; inverses are suffixed with `_inv`.
    pub fn relation_label(&self, id: RelationId) -> String {
        let n = self.num_relations();
        match id {
            i if i < n => self.relations[i].clone(),
            i if i < 2 * n => format!("{}_inv", self.relations[i - n]),
            i if i == self.self_loop() => "[SELF]".into(),
            i if i == self.relation_mask() => "[MASK]".into(),
            i if i == self.relation_pad() => "[PAD]".into(),
            _ => panic!("relation id {id} out of range"),
        }
    }

    pub fn forward_relation_label(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entities
    }

    /// Forward relation labels in id order.
    pub fn relation_labels(&self) -> &[String] {
        &self.relations
    }

    /// Rebuilds a vocabulary from labels in id order; labels must be unique.
    pub fn from_labels(entities: &[String], relations: &[String]) -> Result<Self> {
        let mut b = VocabBuilder::new();
        for (i, l) in entities.iter().enumerate() {
            if b.entity(l) != i {
                return Err(Error::Contract(format!("duplicate entity label {l:?}")));
            }
        }
        for (i, l) in relations.iter().enumerate() {
            if b.relation(l) != i {
                return Err(Error::Contract(format!("duplicate relation label {l:?}")));
            }
        }
        Ok(b.finish())
    }

    /// Reopens the maps so further files can add labels.
    pub fn into_builder(self) -> VocabBuilder {
        VocabBuilder {
            entities: self.entities,
            relations: self.relations,
            entity_index: self.entity_index,
            relation_index: self.relation_index,
        }
    }

    /// Writes `entities.tsv` and `relations.tsv` (forward relations) as
    /// `label<TAB>id` lines.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, labels) in [(ENTITY_FILE, &self.entities), (RELATION_FILE, &self.relations)] {
            let path = dir.join(name);
            let body: String = labels
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{l}\t{i}\n"))
                .collect();
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut builder = VocabBuilder::new();
        for (name, is_entity) in [(ENTITY_FILE, true), (RELATION_FILE, false)] {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in text.lines().enumerate() {
                let parse_err = |msg: &str| Error::Parse {
                    path: path.clone(),
                    line: n + 1,
                    msg: msg.to_owned(),
                };
                let (label, id) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| parse_err("expected label<TAB>id"))?;
                let id: usize = id.trim().parse().map_err(|_| parse_err("bad id"))?;
                let got = if is_entity {
                    builder.entity(label)
                } else {
                    builder.relation(label)
                };
                if got != id {
                    return Err(parse_err(&format!("ids must be dense and ordered, expected {got}")));
                }
            }
        }
        Ok(builder.finish())
    }
}
