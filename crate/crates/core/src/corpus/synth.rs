//! Synthetic data-text corpus for desk-scale experiments.
//!
//! A small world of dishes, places, people and their facts is sampled from
//! pseudo-word names; each record verbalizes one to three connected triples
//! with relation-specific templates. The split is explicit and every test
//! triple also occurs in some training sentence.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kb::FactTriple;
use super::RawRecord;

const ONSETS: &[&str] = &[
    "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "br", "tr", "sh", "kr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "k", "m"];

const INGREDIENT_ADJ: &[&str] = &["fried", "roasted", "sweet", "smoked", "pickled", "dried"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub test_fraction: f64,
    pub countries: usize,
    pub regions: usize,
    pub dishes: usize,
    pub ingredients: usize,
    pub people: usize,
    /// Largest number of triples verbalized by one sentence.
    pub max_triples: usize,
    /// Longest sentence in tokens (markers excluded).
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 2000,
            test_fraction: 0.1,
            countries: 10,
            regions: 14,
            dishes: 50,
            ingredients: 24,
            people: 30,
            max_triples: 3,
            max_words: 30,
            seed: 11,
        }
    }
}

impl SynthConfig {
    /// About fifty triples; used for extractor recall checks.
    pub fn micro(n_pairs: usize, seed: u64) -> Self {
        SynthConfig {
            n_pairs,
            test_fraction: 0.0,
            countries: 3,
            regions: 4,
            dishes: 6,
            ingredients: 6,
            people: 5,
            max_triples: 2,
            max_words: 30,
            seed,
        }
    }
}

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            w.push_str(CODAS.choose(rng).unwrap());
            if self.used.insert(w.clone()) {
                return capitalize(&w);
            }
        }
    }

    fn name(&mut self, rng: &mut ChaCha8Rng, words: usize) -> String {
        (0..words)
            .map(|_| {
                let syl = rng.random_range(2..=3);
                self.word(rng, syl)
            })
            .collect::<Vec<_>>()
            .join("_")
    }

    fn reserve(&mut self, name: &str) -> String {
        for w in name.split('_') {
            self.used.insert(w.to_lowercase());
        }
        name.to_string()
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn surface(name: &str) -> String {
    name.replace('_', " ")
}

/// Clause templates per relation; `{h}` and `{t}` are replaced by names.
fn templates(relation: &str) -> &'static [&'static str] {
    match relation {
        "country" => &["{h} comes from {t}", "{h} is a dish from {t}", "{h} originates from {t}"],
        "region" => &["{h} can be found in {t}", "{h} is popular in {t}", "{h} is served in {t}"],
        "ingredient" => &["{h} contains {t}", "{h} is made with {t}", "the main ingredient of {h} is {t}"],
        "capital" => &["the capital of {h} is {t}", "{t} is the capital of {h}"],
        "language" => &["{t} is spoken in {h}", "the language of {h} is {t}"],
        "leader" => &["{t} is the leader of {h}", "{h} is led by {t}"],
        "ethnicGroup" => &["{t} are an ethnic group in {h}", "{t} live in {h}"],
        "currency" => &["the currency of {h} is the {t}", "{h} uses the {t}"],
        "partOf" => &["{h} is part of {t}", "{h} is a region of {t}"],
        "birthPlace" => &["{h} was born in {t}", "the birthplace of {h} is {t}"],
        "nationality" => &["{h} is a citizen of {t}", "{h} has the nationality of {t}"],
        "creator" => &["{h} was created by {t}", "{t} invented {h}"],
        _ => &["{h} {r} {t}"],
    }
}

fn verbalize(t: &FactTriple, rng: &mut ChaCha8Rng) -> String {
    let tpl = templates(&t.relation).choose(rng).unwrap();
    tpl.replace("{h}", &surface(&t.head))
        .replace("{t}", &surface(&t.tail))
        .replace("{r}", &t.relation)
}

/// Builds the fact world.
pub fn world(cfg: &SynthConfig) -> Vec<FactTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut namer = Namer { used: HashSet::new() };
    let mut triples = Vec::new();
    let mut push = |h: &str, r: &str, t: &str| {
        triples.push(FactTriple::new(h, r, t).expect("generated names are non-empty"));
    };

    let mut countries: Vec<String> = vec![namer.reserve("Singapore")];
    let mut regions: Vec<String> = vec![namer.reserve("Java")];
    while countries.len() < cfg.countries {
        let n = namer.name(&mut rng, 1);
        countries.push(n);
    }
    for c in &countries {
        let capital = namer.name(&mut rng, 1);
        let language = format!("{}_language", namer.word(&mut rng, 2));
        let leader = namer.name(&mut rng, 2);
        let currency = format!("{}_{}", namer.word(&mut rng, 2), "dollar");
        push(c, "capital", &capital);
        push(c, "language", &language);
        push(c, "leader", &leader);
        push(c, "currency", &currency);
    }
    while regions.len() < cfg.regions {
        let n = namer.name(&mut rng, 1);
        regions.push(n);
    }
    let mut ethnic_done = false;
    for (i, r) in regions.iter().enumerate() {
        let c = &countries[i % countries.len()];
        push(r, "partOf", c);
        let group = if !ethnic_done {
            ethnic_done = true;
            namer.reserve("Banyumasan_people")
        } else {
            format!("{}_people", namer.word(&mut rng, 2))
        };
        push(r, "ethnicGroup", &group);
    }
    let mut ingredients: Vec<String> = vec![namer.reserve("Fried_chicken")];
    while ingredients.len() < cfg.ingredients {
        let adj = INGREDIENT_ADJ.choose(&mut rng).unwrap();
        let noun = namer.word(&mut rng, 2);
        let name = format!("{}_{}", capitalize(adj), noun.to_lowercase());
        if !ingredients.contains(&name) {
            ingredients.push(name);
        }
    }
    let mut people: Vec<String> = Vec::new();
    while people.len() < cfg.people {
        people.push(namer.name(&mut rng, 2));
    }
    let mut dishes: Vec<String> = vec![namer.reserve("Ayam_penyet")];
    while dishes.len() < cfg.dishes {
        let w = rng.random_range(1..=2);
        dishes.push(namer.name(&mut rng, w));
    }
    for (i, d) in dishes.iter().enumerate() {
        if i == 0 {
            push(d, "ingredient", "Fried_chicken");
            push(d, "region", "Singapore");
            push(d, "country", "Java");
            continue;
        }
        let c = countries.choose(&mut rng).unwrap();
        push(d, "country", c);
        let r = regions.choose(&mut rng).unwrap();
        push(d, "region", r);
        let n_ing = rng.random_range(1..=2);
        let mut picked: Vec<&String> = ingredients.choose_multiple(&mut rng, n_ing).collect();
        picked.sort();
        for ing in picked {
            push(d, "ingredient", ing);
        }
        if !people.is_empty() && rng.random_bool(0.3) {
            let p = people.choose(&mut rng).unwrap();
            push(d, "creator", p);
        }
    }
    for p in &people {
        let place = if rng.random_bool(0.5) {
            regions.choose(&mut rng).unwrap()
        } else {
            countries.choose(&mut rng).unwrap()
        };
        push(p, "birthPlace", place);
        let c = countries.choose(&mut rng).unwrap();
        push(p, "nationality", c);
    }
    let mut seen = HashSet::new();
    triples.retain(|t| seen.insert(t.clone()));
    triples
}

/// Grows a connected group of up to `k` triples around `seed`.
fn connected_group(world: &[FactTriple], seed: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut group = vec![seed];
    let mut names: BTreeSet<&str> = [world[seed].head.as_str(), world[seed].tail.as_str()].into();
    while group.len() < k {
        let candidates: Vec<usize> = (0..world.len())
            .filter(|&i| {
                !group.contains(&i)
                    && (names.contains(world[i].head.as_str())
                        || names.contains(world[i].tail.as_str()))
            })
            .collect();
        let Some(&next) = candidates.choose(rng) else {
            break;
        };
        names.insert(&world[next].head);
        names.insert(&world[next].tail);
        group.push(next);
    }
    group
}

/// Verbalizes `group`, dropping trailing triples until the sentence fits in
/// `max_words` tokens.
fn fitted_sentence(
    world: &[FactTriple],
    group: &mut Vec<usize>,
    max_words: usize,
    rng: &mut ChaCha8Rng,
) -> String {
    loop {
        let text = sentence(world, group, rng);
        if group.len() == 1 || super::tokenize(&text).len() <= max_words {
            return text;
        }
        group.pop();
    }
}

fn sentence(world: &[FactTriple], group: &[usize], rng: &mut ChaCha8Rng) -> String {
    let clauses: Vec<String> = group.iter().map(|&i| verbalize(&world[i], rng)).collect();
    let body = match clauses.len() {
        1 => clauses[0].clone(),
        2 => format!("{} and {}", clauses[0], clauses[1]),
        _ => {
            let (last, rest) = clauses.split_last().unwrap();
            format!("{} , and {}", rest.join(" , "), last)
        }
    };
    let mut s = capitalize(&body);
    s.push_str(" .");
    s
}

/// Generates records with explicit "train"/"test" splits.
pub fn generate(cfg: &SynthConfig) -> Vec<RawRecord> {
    let world = world(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n_test = (cfg.n_pairs as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.n_pairs - n_test;
    let mut order: Vec<usize> = (0..world.len()).collect();
    order.shuffle(&mut rng);
    let mut covered = vec![false; world.len()];
    let mut texts = HashSet::new();
    let mut records = Vec::with_capacity(cfg.n_pairs);
    let mut attempts = 0;
    let mut next_uncovered = 0;
    while records.len() < n_train && attempts < cfg.n_pairs * 50 {
        attempts += 1;
        let k = rng.random_range(1..=cfg.max_triples.max(1));
        while next_uncovered < order.len() && covered[order[next_uncovered]] {
            next_uncovered += 1;
        }
        let seed = if next_uncovered < order.len() {
            order[next_uncovered]
        } else {
            rng.random_range(0..world.len())
        };
        let mut group = connected_group(&world, seed, k, &mut rng);
        let text = fitted_sentence(&world, &mut group, cfg.max_words, &mut rng);
        if !texts.insert(text.to_lowercase()) {
            continue;
        }
        for &i in &group {
            covered[i] = true;
        }
        records.push(RawRecord {
            text,
            triples: group.iter().map(|&i| world[i].clone()).collect(),
            split: Some("train".into()),
        });
    }
    let mut test = Vec::with_capacity(n_test);
    attempts = 0;
    while test.len() < n_test && attempts < cfg.n_pairs * 50 {
        attempts += 1;
        let k = rng.random_range(1..=cfg.max_triples.max(1));
        let seed = rng.random_range(0..world.len());
        let mut group = connected_group(&world, seed, k, &mut rng);
        let text = fitted_sentence(&world, &mut group, cfg.max_words, &mut rng);
        if !texts.insert(text.to_lowercase()) {
            continue;
        }
        test.push(RawRecord {
            text,
            triples: group.iter().map(|&i| world[i].clone()).collect(),
            split: Some("test".into()),
        });
    }
    records.extend(test);
    records
}
