//! Desk-scale synthetic corpus with planted confusions: people who share a
//! surname, were born in different cities, and wrote works published in
//! different years. Dialogues ask about one fact; gold responses cite it.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, KnowledgeCorpus, KnowledgeSnippet};
use crate::error::{Error, Result};
use crate::text::write_jsonl;

const FIRST: &[&str] = &[
    "Ada", "Bruno", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Karin", "Leon",
    "Marta", "Nils", "Olga", "Pavel", "Rosa", "Stefan", "Tilda", "Viktor", "Wanda", "Yusuf", "Zora", "Anton",
    "Bianca", "Carlo", "Dora", "Emil", "Flora", "Gustav",
];
const LAST: &[&str] = &[
    "Moreau", "Lindqvist", "Okafor", "Petrov", "Castell", "Brandt", "Novak", "Halloran", "Ferreira", "Kowalski",
    "Duval", "Marchetti",
];
const CITIES: &[(&str, &str)] = &[
    ("Lyon", "France"),
    ("Porto", "Portugal"),
    ("Bergen", "Norway"),
    ("Krakow", "Poland"),
    ("Turin", "Italy"),
    ("Ghent", "Belgium"),
    ("Leipzig", "Germany"),
    ("Galway", "Ireland"),
    ("Seville", "Spain"),
    ("Uppsala", "Sweden"),
    ("Brno", "Czechia"),
    ("Tartu", "Estonia"),
    ("Lagos", "Nigeria"),
    ("Kazan", "Russia"),
    ("Basel", "Switzerland"),
];
const JOBS: &[&str] = &["painter", "chemist", "composer", "architect", "botanist", "poet", "engineer", "surgeon"];
const ADJ: &[&str] = &["Silent", "Golden", "Broken", "Hidden", "Northern", "Crimson", "Distant", "Quiet", "Winter", "Burning"];
const NOUN: &[&str] = &["River", "Garden", "Harbor", "Lantern", "Mountain", "Orchard", "Bridge", "Tower", "Meadow", "Voyage"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_people: usize,
    pub n_works: usize,
    pub n_dialogues: usize,
    pub turns_per_dialogue: usize,
    pub test_fraction: f64,
    /// Entities whose dialogues all go to the test split.
    pub holdout_entities: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_people: 30,
            n_works: 20,
            n_dialogues: 500,
            turns_per_dialogue: 1,
            test_fraction: 0.2,
            holdout_entities: 5,
            n_candidates: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub name: String,
    pub birthplace: String,
    pub birth_year: u32,
    pub job: String,
    pub work_city: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Work {
    pub title: String,
    pub author: String,
    pub year: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTurn {
    pub speaker: String,
    pub text: String,
    pub response: String,
    pub positives: Vec<String>,
    pub candidates: Vec<String>,
    pub gold_candidate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDialogue {
    pub id: String,
    pub topic: String,
    pub turns: Vec<SynthTurn>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub people: Vec<Person>,
    pub works: Vec<Work>,
    pub corpus: KnowledgeCorpus,
    pub train: Vec<SynthDialogue>,
    pub test: Vec<SynthDialogue>,
}

fn birth_fact(p: &Person) -> String {
    format!("{} was born in {} in {}.", p.name, p.birthplace, p.birth_year)
}

fn job_fact(p: &Person) -> String {
    format!("{} worked as a {} in {}.", p.name, p.job, p.work_city)
}

fn work_fact(w: &Work) -> String {
    format!("{} was published in {} by {}.", w.title, w.year, w.author)
}

fn city_fact(city: &str, country: &str) -> String {
    format!("{city} is a city in {country}.")
}

enum Entity<'a> {
    Person(&'a Person),
    Work(&'a Work),
}

impl Entity<'_> {
    fn name(&self) -> &str {
        match self {
            Entity::Person(p) => &p.name,
            Entity::Work(w) => &w.title,
        }
    }

    /// A question and the fact it rests on.
    fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> (String, String) {
        match self {
            Entity::Person(p) => match rng.random_range(0..3) {
                0 => (format!("Where was {} born?", p.name), birth_fact(p)),
                1 => (format!("When was {} born?", p.name), birth_fact(p)),
                _ => (format!("What did {} do for a living?", p.name), job_fact(p)),
            },
            Entity::Work(w) => match rng.random_range(0..2) {
                0 => (format!("When was {} published?", w.title), work_fact(w)),
                _ => (format!("Who wrote {}?", w.title), work_fact(w)),
            },
        }
    }
}

/// Openers placed before the cited fact in gold responses.
const OPENERS: &[&str] = &["", "I think ", "Well, ", "As far as I know, ", "I read that "];

/// The gold response cites the fact, after an optional opener.
fn respond<R: Rng + ?Sized>(fact: &str, rng: &mut R) -> String {
    let opener = OPENERS.choose(rng).expect("openers");
    format!("{opener}{fact}")
}

pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    let max_people = FIRST.len();
    if config.n_people == 0 || config.n_people > max_people {
        return Err(Error::Config(format!("n_people must lie in 1..={max_people}")));
    }
    if config.n_works > ADJ.len() * NOUN.len() {
        return Err(Error::Config("too many works requested".into()));
    }
    if config.n_candidates == 0 || config.turns_per_dialogue == 0 {
        return Err(Error::Config("n_candidates and turns_per_dialogue must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut first: Vec<&str> = FIRST.to_vec();
    first.shuffle(&mut rng);
    // Few surnames, so several people share each one.
    let n_families = (config.n_people / 3).clamp(1, LAST.len());
    let people: Vec<Person> = (0..config.n_people)
        .map(|i| {
            let birth = CITIES.choose(&mut rng).expect("cities").0;
            let work_city = loop {
                let c = CITIES.choose(&mut rng).expect("cities").0;
                if c != birth {
                    break c;
                }
            };
            Person {
                name: format!("{} {}", first[i], LAST[i % n_families]),
                birthplace: birth.to_string(),
                birth_year: rng.random_range(1820..1960),
                job: JOBS.choose(&mut rng).expect("jobs").to_string(),
                work_city: work_city.to_string(),
            }
        })
        .collect();

    let mut titles: Vec<String> = ADJ.iter().flat_map(|a| NOUN.iter().map(move |n| format!("{a} {n}"))).collect();
    titles.shuffle(&mut rng);
    let works: Vec<Work> = titles
        .into_iter()
        .take(config.n_works)
        .map(|title| {
            let author = people.choose(&mut rng).expect("people");
            Work {
                title,
                author: author.name.clone(),
                year: author.birth_year + rng.random_range(20..60),
            }
        })
        .collect();

    let mut snippets = Vec::new();
    for (i, p) in people.iter().enumerate() {
        snippets.push(KnowledgeSnippet::new(format!("p{i}-birth"), p.name.clone(), birth_fact(p)));
        snippets.push(KnowledgeSnippet::new(format!("p{i}-job"), p.name.clone(), job_fact(p)));
    }
    for (i, w) in works.iter().enumerate() {
        snippets.push(KnowledgeSnippet::new(format!("w{i}"), w.title.clone(), work_fact(w)));
    }
    for (i, (city, country)) in CITIES.iter().enumerate() {
        snippets.push(KnowledgeSnippet::new(format!("c{i}"), *city, city_fact(city, country)));
    }
    let all_facts: Vec<String> = snippets.iter().map(|s| s.text.clone()).collect();
    let corpus = KnowledgeCorpus::new(snippets)?;

    let entities: Vec<Entity> = people
        .iter()
        .map(Entity::Person)
        .chain(works.iter().map(Entity::Work))
        .collect();
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.shuffle(&mut rng);
    let holdout: Vec<usize> = order.iter().copied().take(config.holdout_entities.min(entities.len())).collect();

    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    for d in 0..config.n_dialogues {
        let e = &entities[rng.random_range(0..entities.len())];
        let turns = (0..config.turns_per_dialogue)
            .map(|_| {
                let (question, fact) = e.ask(&mut rng);
                let response = respond(&fact, &mut rng);
                let mut candidates: Vec<String> = all_facts
                    .iter()
                    .filter(|f| **f != fact)
                    .cloned()
                    .collect::<Vec<_>>()
                    .choose_multiple(&mut rng, config.n_candidates - 1)
                    .cloned()
                    .collect();
                let gold = rng.random_range(0..=candidates.len());
                candidates.insert(gold, fact.clone());
                SynthTurn {
                    speaker: "apprentice".into(),
                    text: question,
                    response,
                    positives: vec![fact],
                    candidates,
                    gold_candidate: gold,
                }
            })
            .collect();
        dialogues.push((
            holdout.iter().any(|&h| entities[h].name() == e.name()),
            SynthDialogue {
                id: format!("syn{d:04}"),
                topic: e.name().to_string(),
                turns,
            },
        ));
    }

    let target_test = (config.n_dialogues as f64 * config.test_fraction).round() as usize;
    let (mut test, mut rest): (Vec<_>, Vec<_>) = dialogues.into_iter().partition(|(held, _)| *held);
    let mut test: Vec<SynthDialogue> = test.drain(..).map(|(_, d)| d).collect();
    let mut rest: Vec<SynthDialogue> = rest.drain(..).map(|(_, d)| d).collect();
    while test.len() < target_test && !rest.is_empty() {
        let i = rng.random_range(0..rest.len());
        test.push(rest.remove(i));
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SynthWorld {
        people,
        works,
        corpus,
        train: rest,
        test,
    })
}

/// Writes `corpus.jsonl`, `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_world(dir: &Path, world: &SynthWorld) -> Result<()> {
    write_corpus(&dir.join("corpus.jsonl"), &world.corpus)?;
    write_jsonl(&dir.join("train.jsonl"), None::<&()>, &world.train)?;
    write_jsonl(&dir.join("test.jsonl"), None::<&()>, &world.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dialogues;
    use std::collections::HashSet;

    #[test]
    fn world_shape() {
        let cfg = SynthConfig::default();
        let w = generate(&cfg).unwrap();
        assert_eq!(w.people.len() + w.works.len(), 50);
        assert_eq!(w.train.len() + w.test.len(), 500);
        assert!(w.test.len() >= 100);
        let held: HashSet<&str> = w.test.iter().map(|d| d.topic.as_str()).collect();
        let seen: HashSet<&str> = w.train.iter().map(|d| d.topic.as_str()).collect();
        assert!(held.difference(&seen).count() >= 1);
        let again = generate(&cfg).unwrap();
        assert_eq!(again.train, w.train);
    }

    #[test]
    fn files_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate(&SynthConfig {
            n_dialogues: 40,
            ..Default::default()
        })
        .unwrap();
        write_world(dir.path(), &w).unwrap();
        let (train, stats) = load_dialogues(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(stats.examples, train.len());
        assert_eq!(train.len(), w.train.len());
        for ex in &train {
            let gold = &ex.candidates[ex.gold_candidate.unwrap()];
            assert_eq!(gold.text, ex.positives[0].text);
        }
    }
}
