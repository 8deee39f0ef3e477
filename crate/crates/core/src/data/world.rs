//! Seeded synthetic fact world: typed entities, templated facts, and the
//! QA / multiple-choice / completion records derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ner::Gazetteer;
use super::tokenizer::pre_tokenize;
use super::{EntitySpan, EntityType, FactorItem, FqaSample, McItem};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_facts: usize,
    /// Share of facts held out for evaluation items.
    pub eval_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 44,
            n_entities: 700,
            n_facts: 1200,
            eval_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub etype: EntityType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    BornIn,
    BornYear,
    WorksFor,
    BasedIn,
    FoundedIn,
}

impl Relation {
    pub fn subject_type(self) -> EntityType {
        match self {
            Relation::BornIn | Relation::BornYear | Relation::WorksFor => EntityType::Person,
            Relation::BasedIn | Relation::FoundedIn => EntityType::Org,
        }
    }

    pub fn object_type(self) -> EntityType {
        match self {
            Relation::BornIn | Relation::BasedIn => EntityType::City,
            Relation::BornYear | Relation::FoundedIn => EntityType::Year,
            Relation::WorksFor => EntityType::Org,
        }
    }

    /// Words between subject and object in the declarative sentence.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::BornIn => "was born in",
            Relation::BornYear => "has the birth year",
            Relation::WorksFor => "works for",
            Relation::BasedIn => "is based in",
            Relation::FoundedIn => "was founded in",
        }
    }

    pub fn question(self, subject: &str) -> String {
        match self {
            Relation::BornIn => format!("Where was {subject} born?"),
            Relation::BornYear => format!("When was {subject} born?"),
            Relation::WorksFor => format!("Who does {subject} work for?"),
            Relation::BasedIn => format!("Where is {subject} based?"),
            Relation::FoundedIn => format!("When was {subject} founded?"),
        }
    }

    const PERSON: [Relation; 3] = [Relation::BornIn, Relation::BornYear, Relation::WorksFor];
    const ORG: [Relation; 2] = [Relation::BasedIn, Relation::FoundedIn];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub entities: Vec<Entity>,
    pub facts: Vec<Fact>,
    /// Fact ids available to fine-tuning.
    pub train_facts: Vec<usize>,
    /// Held-out fact ids; evaluation items derive only from these.
    pub eval_facts: Vec<usize>,
}

impl World {
    pub fn sentence(&self, f: &Fact) -> String {
        self.sentence_with_object(f, f.object)
    }

    pub fn sentence_with_object(&self, f: &Fact, object: usize) -> String {
        format!(
            "{} {} {}.",
            self.entities[f.subject].name,
            f.relation.phrase(),
            self.entities[object].name
        )
    }

    pub fn prefix(&self, f: &Fact) -> String {
        format!("{} {}", self.entities[f.subject].name, f.relation.phrase())
    }

    fn piece_len(&self, e: usize) -> usize {
        pre_tokenize(&self.entities[e].name).len()
    }

    /// Distinct same-type entities with the same token length as `object`.
    fn distractors(&self, object: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let etype = self.entities[object].etype;
        let len = self.piece_len(object);
        let pool: Vec<usize> = (0..self.entities.len())
            .filter(|&e| e != object && self.entities[e].etype == etype && self.piece_len(e) == len)
            .collect();
        if pool.len() < n {
            return Err(Error::invalid(format!(
                "insufficient {etype} entities for distractor sampling (need {n}, have {})",
                pool.len()
            )));
        }
        Ok(pool.choose_multiple(rng, n).copied().collect())
    }
}

/// Everything produced by [`generate_world`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWorld {
    pub world: World,
    /// One declarative sentence per fact (training and held-out).
    pub corpus: Vec<String>,
    pub fqa: Vec<FqaSample>,
    pub mc: Vec<McItem>,
    pub factor: Vec<FactorItem>,
    pub gazetteer: Gazetteer,
    /// Source fact ids per record, parallel to `fqa`, `mc`, `factor`.
    pub fqa_facts: Vec<Vec<usize>>,
    pub mc_facts: Vec<usize>,
    pub factor_facts: Vec<usize>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];
const ORG_SUFFIXES: [&str; 3] = ["Labs", "Group", "Works"];
const CITY_PREFIX: &str = "Port";

/// Bumped whenever the generator's output changes for a fixed config, so
/// cached artifacts keyed on the config are not reused across formats.
pub const WORLD_FORMAT: u32 = 2;

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn fresh_name(rng: &mut ChaCha8Rng, syllables: usize, used: &mut BTreeSet<String>) -> String {
    loop {
        let mut s = String::new();
        for _ in 0..syllables {
            s.push_str(ONSETS.choose(rng).unwrap());
            s.push_str(VOWELS.choose(rng).unwrap());
        }
        s.push_str(CODAS.choose(rng).unwrap());
        let name = capitalize(&s);
        if used.insert(name.clone()) {
            return name;
        }
    }
}

fn ceil_sqrt(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

/// Generates the world, its corpus and every derived record set.
pub fn generate_world(cfg: &WorldConfig) -> Result<GeneratedWorld> {
    let mut problems = Vec::new();
    if cfg.n_entities < 10 {
        problems.push(format!("n_entities must be >= 10 (got {})", cfg.n_entities));
    }
    if cfg.n_facts < cfg.n_entities {
        problems.push(format!(
            "n_facts ({}) must be >= n_entities ({})",
            cfg.n_facts, cfg.n_entities
        ));
    }
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        problems.push(format!("eval_fraction {} outside [0, 1)", cfg.eval_fraction));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_entities;
    let n_person = n / 2;
    let n_city = n / 5;
    let n_org = (n * 3) / 20;
    let n_year = n - n_person - n_city - n_org;

    let mut used: BTreeSet<String> = [
        "Q", "A", "Knowledge", "Where", "When", "Who", "What", "How", "Port", "Labs", "Group", "Works",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut entities = Vec::with_capacity(n);

    let pool = ceil_sqrt(n_person) + 2;
    let firsts: Vec<String> = (0..pool).map(|_| fresh_name(&mut rng, 2, &mut used)).collect();
    let lasts: Vec<String> = (0..pool).map(|_| fresh_name(&mut rng, 2, &mut used)).collect();
    let mut combos: Vec<(usize, usize)> = (0..pool).flat_map(|i| (0..pool).map(move |j| (i, j))).collect();
    combos.shuffle(&mut rng);
    for &(i, j) in combos.iter().take(n_person) {
        entities.push(Entity {
            name: format!("{} {}", firsts[i], lasts[j]),
            etype: EntityType::Person,
        });
    }

    // A minority of cities are "Port X" where X is itself a city, so the
    // gazetteer has nested surface forms.
    let n_port = if n_city >= 20 { (n_city * 3 / 20).max(4) } else { 0 };
    let n_plain = n_city - n_port;
    let plain_start = entities.len();
    for _ in 0..n_plain {
        let name = fresh_name(&mut rng, 2, &mut used);
        entities.push(Entity {
            name,
            etype: EntityType::City,
        });
    }
    for i in 0..n_port {
        let base = entities[plain_start + i].name.clone();
        entities.push(Entity {
            name: format!("{CITY_PREFIX} {base}"),
            etype: EntityType::City,
        });
    }

    for i in 0..n_org {
        let stem = fresh_name(&mut rng, 2, &mut used);
        entities.push(Entity {
            name: format!("{stem} {}", ORG_SUFFIXES[i % ORG_SUFFIXES.len()]),
            etype: EntityType::Org,
        });
    }

    let mut years: Vec<usize> = (1800..2000).collect();
    years.shuffle(&mut rng);
    if n_year > years.len() {
        return Err(Error::Config(vec![format!("too many year entities ({n_year})")]));
    }
    let mut years: Vec<usize> = years.into_iter().take(n_year).collect();
    years.sort();
    for y in years {
        entities.push(Entity {
            name: y.to_string(),
            etype: EntityType::Year,
        });
    }

    let by_type = |t: EntityType| -> Vec<usize> {
        (0..entities.len()).filter(|&e| entities[e].etype == t).collect()
    };
    let persons = by_type(EntityType::Person);
    let orgs = by_type(EntityType::Org);
    let mut candidates: Vec<(usize, Relation)> = persons
        .iter()
        .flat_map(|&p| Relation::PERSON.iter().map(move |&r| (p, r)))
        .chain(orgs.iter().flat_map(|&o| Relation::ORG.iter().map(move |&r| (o, r))))
        .collect();
    if cfg.n_facts > candidates.len() {
        return Err(Error::Config(vec![format!(
            "n_facts {} exceeds the {} available subject/relation pairs",
            cfg.n_facts,
            candidates.len()
        )]));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(cfg.n_facts);
    candidates.sort();
    let objects_of: BTreeMap<EntityType, Vec<usize>> = EntityType::ALL.iter().map(|&t| (t, by_type(t))).collect();
    let facts: Vec<Fact> = candidates
        .iter()
        .enumerate()
        .map(|(id, &(subject, relation))| {
            let pool = &objects_of[&relation.object_type()];
            Fact {
                id,
                subject,
                relation,
                object: pool[rng.random_range(0..pool.len())],
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let n_eval = ((facts.len() as f64) * cfg.eval_fraction).round() as usize;
    let mut eval_facts: Vec<usize> = order[..n_eval].to_vec();
    let mut train_facts: Vec<usize> = order[n_eval..].to_vec();
    eval_facts.sort();
    train_facts.sort();

    let world = World {
        entities,
        facts,
        train_facts,
        eval_facts,
    };

    let mut gazetteer = Gazetteer::new();
    for e in &world.entities {
        gazetteer.insert(e.name.clone(), e.etype);
    }

    let corpus: Vec<String> = world.facts.iter().map(|f| world.sentence(f)).collect();

    // Knowledge = the fact plus, when available, one more training fact about
    // the same subject.
    let mut train_by_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &fid in &world.train_facts {
        train_by_subject.entry(world.facts[fid].subject).or_default().push(fid);
    }
    let mut fqa = Vec::with_capacity(world.train_facts.len());
    let mut fqa_facts = Vec::with_capacity(world.train_facts.len());
    for &fid in &world.train_facts {
        let f = world.facts[fid];
        let siblings: Vec<usize> = train_by_subject[&f.subject]
            .iter()
            .copied()
            .filter(|&o| o != fid)
            .collect();
        let mut used_facts = vec![fid];
        let mut parts = vec![f];
        if let Some(&other) = siblings.choose(&mut rng) {
            used_facts.push(other);
            parts.push(world.facts[other]);
        }
        let mut knowledge = String::new();
        let mut entities = Vec::new();
        for part in &parts {
            if !knowledge.is_empty() {
                knowledge.push(' ');
            }
            let base = knowledge.chars().count();
            let subj = &world.entities[part.subject];
            let obj = &world.entities[part.object];
            entities.push(EntitySpan {
                start: base,
                end: base + subj.name.chars().count(),
                etype: subj.etype,
            });
            let obj_start = base + subj.name.chars().count() + 1 + part.relation.phrase().chars().count() + 1;
            entities.push(EntitySpan {
                start: obj_start,
                end: obj_start + obj.name.chars().count(),
                etype: obj.etype,
            });
            knowledge.push_str(&world.sentence(part));
        }
        let distractor = world.distractors(f.object, 1, &mut rng)?[0];
        fqa.push(FqaSample {
            id: format!("fqa-{fid}"),
            knowledge,
            question: f.relation.question(&world.entities[f.subject].name),
            answer: format!("{}.", world.entities[f.object].name),
            hallucinated_answer: Some(format!("{}.", world.entities[distractor].name)),
            entities,
        });
        fqa_facts.push(used_facts);
    }

    let mut mc = Vec::with_capacity(world.eval_facts.len());
    let mut factor = Vec::with_capacity(world.eval_facts.len());
    for &fid in &world.eval_facts {
        let f = world.facts[fid];
        let d = world.distractors(f.object, 3, &mut rng)?;
        let subject = &world.entities[f.subject].name;
        mc.push(McItem {
            id: format!("mc-{fid}"),
            question: f.relation.question(subject),
            true_answers: vec![format!("{}.", world.entities[f.object].name), world.sentence(&f)],
            false_answers: d
                .iter()
                .map(|&o| format!("{}.", world.entities[o].name))
                .chain(std::iter::once(world.sentence_with_object(&f, d[0])))
                .collect(),
            best_index: 0,
        });
        factor.push(FactorItem {
            id: format!("factor-{fid}"),
            prefix: world.prefix(&f),
            factual_completion: format!("{}.", world.entities[f.object].name),
            nonfactual_completions: d.iter().map(|&o| format!("{}.", world.entities[o].name)).collect(),
        });
    }
    let mc_facts = world.eval_facts.clone();
    let factor_facts = world.eval_facts.clone();

    Ok(GeneratedWorld {
        world,
        corpus,
        fqa,
        mc,
        factor,
        gazetteer,
        fqa_facts,
        mc_facts,
        factor_facts,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

impl GeneratedWorld {
    /// Writes corpus.txt, fqa.jsonl, mc.jsonl, factor.jsonl, gazetteer.json.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut corpus = self.corpus.join("\n");
        corpus.push('\n');
        fs::write(dir.join("corpus.txt"), corpus)?;
        write_jsonl(&dir.join("fqa.jsonl"), &self.fqa)?;
        write_jsonl(&dir.join("mc.jsonl"), &self.mc)?;
        write_jsonl(&dir.join("factor.jsonl"), &self.factor)?;
        fs::write(dir.join("gazetteer.json"), serde_json::to_string_pretty(&self.gazetteer)?)?;
        Ok(())
    }

    /// Fact sentences that the object prediction should be scored on:
    /// `(prefix, object)` for every fact.
    pub fn fact_probes(&self) -> Vec<(String, String)> {
        self.world
            .facts
            .iter()
            .map(|f| (self.world.prefix(f), self.world.entities[f.object].name.clone()))
            .collect()
    }
}
