//! Question synthesis over a generated world.

use super::world::fact_sentence;
use super::{
    Answer, Corpus, CorpusConfig, Paragraph, QAExample, QType, SingleHopExample, SubQuestion,
    World,
};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-generator seed per (corpus seed, stream, item).
pub fn subseed(seed: u64, stream: u64, item: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream) ^ splitmix64(item).rotate_left(17))
}

/// A two-hop fact chain `x --r1--> b --r2--> a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Chain {
    pub x: String,
    pub r1: String,
    pub b: String,
    pub r2: String,
    pub a: String,
}

/// Two entities sharing a comparable numeric attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ComparisonPair {
    pub x: String,
    pub y: String,
    pub attr: String,
    pub vx: u32,
    pub vy: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonVariant {
    Yn,
    Span,
}

pub(crate) fn enumerate_chains(world: &World) -> Vec<Chain> {
    let mut chains = Vec::new();
    for (x, facts) in &world.relations {
        for (r1, b) in facts {
            if !world.is_entity(b) {
                continue;
            }
            for (r2, a) in &world.relations[b] {
                if a == x || a == b {
                    continue;
                }
                chains.push(Chain {
                    x: x.clone(),
                    r1: r1.clone(),
                    b: b.clone(),
                    r2: r2.clone(),
                    a: a.clone(),
                });
            }
        }
    }
    chains
}

pub(crate) fn enumerate_comparison_pairs(world: &World) -> Vec<ComparisonPair> {
    let mut pairs = Vec::new();
    for attr in &world.numeric_attributes {
        let holders: Vec<(&String, u32)> = world
            .entities
            .iter()
            .filter_map(|e| {
                world
                    .value_of(e, attr)
                    .and_then(|v| v.parse::<u32>().ok())
                    .map(|v| (e, v))
            })
            .collect();
        for i in 0..holders.len() {
            for j in (i + 1)..holders.len() {
                pairs.push(ComparisonPair {
                    x: holders[i].0.clone(),
                    y: holders[j].0.clone(),
                    attr: attr.clone(),
                    vx: holders[i].1,
                    vy: holders[j].1,
                });
            }
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Question templates
// ---------------------------------------------------------------------------

pub(crate) fn bridge_question(r2: &str, r1: &str, x: &str) -> String {
    format!("what is the {r2} of the {r1} of {x} ?")
}

pub(crate) fn single_hop_question(rel: &str, subject: &str) -> String {
    format!("what is the {rel} of {subject} ?")
}

fn comparison_span_question(attr: &str, x: &str, y: &str, greater: bool) -> String {
    let cmp = if greater { "greater" } else { "smaller" };
    format!("which of {x} and {y} has the {cmp} {attr} ?")
}

fn comparison_yn_greater_question(attr: &str, x: &str, y: &str) -> String {
    format!("is the {attr} of {x} greater than the {attr} of {y} ?")
}

fn comparison_yn_equal_question(attr: &str, x: &str, y: &str) -> String {
    format!("is the {attr} of {x} equal to the {attr} of {y} ?")
}

/// Relation and subject of a single-hop question produced by
/// [`single_hop_question`].
pub(crate) fn parse_single_hop_question(question: &str) -> Option<(String, String)> {
    let toks: Vec<&str> = question.split_whitespace().collect();
    if toks.len() == 7 && toks[0] == "what" && toks[4] == "of" {
        Some((toks[3].to_string(), toks[5].to_string()))
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Distractor selection
// ---------------------------------------------------------------------------

struct DistractorSpec<'a> {
    /// Relation whose presence makes a paragraph shortcut bait.
    bait_relation: &'a str,
    /// Bait paragraphs must not state this value for the bait relation.
    avoid_value: Option<&'a str>,
    /// Entities whose paragraphs must not mention this token.
    forbidden_token: Option<&'a str>,
}

fn pick_distractors(
    world: &World,
    config: &CorpusConfig,
    golds: [&str; 2],
    spec: &DistractorSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let mut bait = Vec::new();
    let mut clean = Vec::new();
    for e in &world.entities {
        if golds.contains(&e.as_str()) {
            continue;
        }
        if let Some(tok) = spec.forbidden_token {
            if world.paragraph_mentions(e, tok) {
                continue;
            }
        }
        match world.value_of(e, spec.bait_relation) {
            Some(v) => {
                if spec.avoid_value != Some(v) {
                    bait.push(e.clone());
                }
            }
            None => clean.push(e.clone()),
        }
    }
    bait.shuffle(rng);
    clean.shuffle(rng);

    let need = config.n_candidate_paragraphs - 2;
    let mut picked = Vec::with_capacity(need);
    for _ in 0..need {
        let take_bait = rng.random::<f64>() < config.distractor_overlap_rate;
        let source = match (take_bait, bait.is_empty(), clean.is_empty()) {
            (_, true, true) => {
                return Err(Error::Corpus(format!(
                    "not enough distractor candidates (need {need})"
                )))
            }
            (true, false, _) | (false, _, true) => &mut bait,
            _ => &mut clean,
        };
        picked.push(source.pop().expect("nonempty source"));
    }
    Ok(picked)
}

/// Place two gold paragraphs among distractors in shuffled order.
/// Returns (paragraphs, position of gold 1, position of gold 2).
fn layout_paragraphs(
    world: &World,
    golds: [&str; 2],
    distractors: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> (Vec<Paragraph>, usize, usize) {
    let mut names: Vec<String> = Vec::with_capacity(distractors.len() + 2);
    names.push(golds[0].to_string());
    names.push(golds[1].to_string());
    names.extend(distractors);
    names.shuffle(rng);
    let p1 = names.iter().position(|n| n == golds[0]).expect("gold 1");
    let p2 = names.iter().position(|n| n == golds[1]).expect("gold 2");
    let paragraphs = names.iter().map(|n| world.paragraph(n)).collect();
    (paragraphs, p1, p2)
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

fn synthesize_bridge_from(
    world: &World,
    config: &CorpusConfig,
    chain: &Chain,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<QAExample> {
    let spec = DistractorSpec {
        bait_relation: &chain.r2,
        avoid_value: Some(&chain.a),
        forbidden_token: Some(&chain.b),
    };
    let distractors = pick_distractors(world, config, [&chain.x, &chain.b], &spec, rng)?;
    let (paragraphs, p1, p2) = layout_paragraphs(world, [&chain.x, &chain.b], distractors, rng);

    let s1 = world
        .sentence_index(&chain.x, &chain.r1)
        .ok_or_else(|| Error::Corpus("chain fact missing".into()))?;
    let s2 = world
        .sentence_index(&chain.b, &chain.r2)
        .ok_or_else(|| Error::Corpus("chain fact missing".into()))?;
    let mut supporting = vec![(p1, s1), (p2, s2)];
    supporting.sort_unstable();

    let example = QAExample {
        id,
        question: bridge_question(&chain.r2, &chain.r1, &chain.x),
        qtype: QType::Bridge,
        paragraphs,
        gold_paragraph_indices: [p1, p2],
        supporting,
        answer: Answer::Span(chain.a.clone()),
        sub_questions: vec![
            SubQuestion {
                question: single_hop_question(&chain.r1, &chain.x),
                answer: chain.b.clone(),
                gold_paragraph_index: p1,
            },
            SubQuestion {
                question: single_hop_question(&chain.r2, &chain.b),
                answer: chain.a.clone(),
                gold_paragraph_index: p2,
            },
        ],
        adversarial_paragraph_index: None,
    };
    example.validate()?;
    Ok(example)
}

/// Synthesize one bridge example over a random chain of the world.
pub fn synthesize_bridge(
    world: &World,
    config: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> Result<QAExample> {
    let chains = enumerate_chains(world);
    if chains.is_empty() {
        return Err(Error::Corpus("no 2-hop chain available".into()));
    }
    let chain = &chains[rng.random_range(0..chains.len())];
    synthesize_bridge_from(world, config, chain, "bridge-0".into(), rng)
}

fn synthesize_comparison_from(
    world: &World,
    config: &CorpusConfig,
    pair: &ComparisonPair,
    variant: ComparisonVariant,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<QAExample> {
    // Mention order in the question is randomized.
    let flip = rng.random::<bool>();
    let (x, vx, y, vy) = if flip {
        (&pair.y, pair.vy, &pair.x, pair.vx)
    } else {
        (&pair.x, pair.vx, &pair.y, pair.vy)
    };

    let (question, qtype, answer) = match variant {
        ComparisonVariant::Span => {
            if vx == vy {
                return Err(Error::Corpus(
                    "comparison-span needs strictly unequal attribute values".into(),
                ));
            }
            let greater = rng.random::<bool>();
            let winner = match (greater, vx > vy) {
                (true, true) | (false, false) => x,
                _ => y,
            };
            (
                comparison_span_question(&pair.attr, x, y, greater),
                QType::ComparisonSpan,
                Answer::Span(winner.clone()),
            )
        }
        ComparisonVariant::Yn => {
            let equal_template = rng.random::<f64>() < 0.25;
            if equal_template {
                let ans = if vx == vy { Answer::Yes } else { Answer::No };
                (
                    comparison_yn_equal_question(&pair.attr, x, y),
                    QType::ComparisonYn,
                    ans,
                )
            } else {
                let ans = if vx > vy { Answer::Yes } else { Answer::No };
                (
                    comparison_yn_greater_question(&pair.attr, x, y),
                    QType::ComparisonYn,
                    ans,
                )
            }
        }
    };

    let spec = DistractorSpec {
        bait_relation: &pair.attr,
        avoid_value: None,
        forbidden_token: None,
    };
    let distractors = pick_distractors(world, config, [x, y], &spec, rng)?;
    let (paragraphs, px, py) = layout_paragraphs(world, [x, y], distractors, rng);

    let sx = world
        .sentence_index(x, &pair.attr)
        .ok_or_else(|| Error::Corpus("attribute fact missing".into()))?;
    let sy = world
        .sentence_index(y, &pair.attr)
        .ok_or_else(|| Error::Corpus("attribute fact missing".into()))?;
    let mut supporting = vec![(px, sx), (py, sy)];
    supporting.sort_unstable();

    // Hop order for comparison questions is canonical: ascending index.
    let gold_paragraph_indices = [px.min(py), px.max(py)];

    let example = QAExample {
        id,
        question,
        qtype,
        paragraphs,
        gold_paragraph_indices,
        supporting,
        answer,
        sub_questions: vec![
            SubQuestion {
                question: single_hop_question(&pair.attr, x),
                answer: vx.to_string(),
                gold_paragraph_index: px,
            },
            SubQuestion {
                question: single_hop_question(&pair.attr, y),
                answer: vy.to_string(),
                gold_paragraph_index: py,
            },
        ],
        adversarial_paragraph_index: None,
    };
    example.validate()?;
    Ok(example)
}

/// Synthesize one comparison example over a random attribute-sharing pair.
pub fn synthesize_comparison(
    world: &World,
    config: &CorpusConfig,
    variant: ComparisonVariant,
    rng: &mut ChaCha8Rng,
) -> Result<QAExample> {
    let mut pairs = enumerate_comparison_pairs(world);
    if variant == ComparisonVariant::Span {
        pairs.retain(|p| p.vx != p.vy);
    }
    if pairs.is_empty() {
        return Err(Error::Corpus("no comparable attribute pair".into()));
    }
    let pair = pairs[rng.random_range(0..pairs.len())].clone();
    synthesize_comparison_from(world, config, &pair, variant, "comparison-0".into(), rng)
}

/// Copy the second-hop gold sentence into a distractor paragraph with the
/// subject and answer replaced. Gold labels are untouched, so the original
/// answer stays valid while the shortcut (relation word match) now leads to a
/// contradicting value.
pub fn inject_adversarial(
    example: &QAExample,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> QAExample {
    if example.qtype != QType::Bridge {
        eprintln!(
            "warning: adversarial injection skipped for non-bridge example {}",
            example.id
        );
        return example.clone();
    }
    let mut out = example.clone();
    let [_, p2] = example.gold_paragraph_indices;
    let (_, s2) = *example
        .supporting
        .iter()
        .find(|(p, _)| *p == p2)
        .expect("hop-2 supporting sentence");
    // Parse "the <r2> of <b> is <a> ." back out of the gold sentence.
    let gold_sentence = &example.paragraphs[p2].sentences[s2];
    let toks: Vec<&str> = gold_sentence.split_whitespace().collect();
    assert_eq!(toks.len(), 7, "fact sentence template");
    let (r2, bridge_entity, answer) = (toks[1], toks[3], toks[5]);

    let candidates: Vec<usize> = (0..example.paragraphs.len())
        .filter(|i| !example.gold_paragraph_indices.contains(i))
        .collect();
    // Prefer a distractor that does not already state the bait relation.
    let fresh: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| world.value_of(&example.paragraphs[i].title, r2).is_none())
        .collect();
    let pool = if fresh.is_empty() { &candidates } else { &fresh };
    let target = pool[rng.random_range(0..pool.len())];
    let fake_subject = example.paragraphs[target].title.clone();

    let fake_value = sample_fake_value(world, answer, &[answer, bridge_entity, &fake_subject], rng);
    out.paragraphs[target]
        .sentences
        .push(fact_sentence(r2, &fake_subject, &fake_value));
    out.adversarial_paragraph_index = Some(target);
    out
}

/// A replacement value of the same kind as `like`, distinct from everything
/// in `exclude`.
fn sample_fake_value(
    world: &World,
    like: &str,
    exclude: &[&str],
    rng: &mut ChaCha8Rng,
) -> String {
    if like.parse::<u32>().is_ok() {
        loop {
            let v = rng.random_range(1900u32..=1919).to_string();
            if !exclude.contains(&v.as_str()) {
                return v;
            }
        }
    }
    loop {
        let v = &world.entities[rng.random_range(0..world.entities.len())];
        if !exclude.contains(&v.as_str()) {
            return v.clone();
        }
    }
}

/// Expand every example into its two single-hop items: the sub-question, its
/// gold paragraph plus sampled distractors, and the supporting sentence.
pub fn derive_singlehop_dataset(
    examples: &[QAExample],
    n_distractors: usize,
    seed: u64,
) -> Vec<SingleHopExample> {
    let mut out = Vec::with_capacity(examples.len() * 2);
    for (i, example) in examples.iter().enumerate() {
        for (k, sub) in example.sub_questions.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(subseed(seed, 0x5148, (i * 2 + k) as u64));
            let gold = example.paragraphs[sub.gold_paragraph_index].clone();
            let mut pool: Vec<usize> = (0..example.paragraphs.len())
                .filter(|p| !example.gold_paragraph_indices.contains(p))
                .collect();
            pool.shuffle(&mut rng);
            pool.truncate(n_distractors);

            let mut paragraphs: Vec<Paragraph> = vec![gold];
            paragraphs.extend(pool.iter().map(|&p| example.paragraphs[p].clone()));
            paragraphs.shuffle(&mut rng);

            let (rel, subject) =
                parse_single_hop_question(&sub.question).expect("single-hop template");
            let gold_paragraph_index = paragraphs
                .iter()
                .position(|p| p.title == subject)
                .expect("gold paragraph present");
            let sentence = fact_sentence(&rel, &subject, &sub.answer);
            let sentence_index = paragraphs[gold_paragraph_index]
                .sentences
                .iter()
                .position(|s| *s == sentence)
                .expect("supporting sentence present");

            out.push(SingleHopExample {
                id: format!("{}-sub{}", example.id, k + 1),
                question: sub.question.clone(),
                paragraphs,
                gold_paragraph_index,
                supporting: (gold_paragraph_index, sentence_index),
                answer: sub.answer.clone(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// Exact per-type counts for `n` examples under the configured mixture.
fn type_schedule(config: &CorpusConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<QType> {
    let total = config.mix_bridge + config.mix_comparison_yn + config.mix_comparison_span;
    let fracs = [
        (QType::Bridge, config.mix_bridge / total),
        (QType::ComparisonYn, config.mix_comparison_yn / total),
        (QType::ComparisonSpan, config.mix_comparison_span / total),
    ];
    let mut counts: Vec<(QType, usize, f64)> = fracs
        .iter()
        .map(|&(t, f)| {
            let exact = f * n as f64;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = counts.iter().map(|c| c.1).sum();
    // Distribute the remainder by largest fractional part.
    counts.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let n_types = counts.len();
    let mut i = 0;
    while assigned < n {
        counts[i % n_types].1 += 1;
        assigned += 1;
        i += 1;
    }
    let mut schedule = Vec::with_capacity(n);
    for (t, c, _) in counts {
        schedule.extend(std::iter::repeat_n(t, c));
    }
    schedule.shuffle(rng);
    schedule
}

/// Generate train, dev, and adversarial-dev splits. Bridge chains and
/// comparison pairs are partitioned across splits so dev questions are not
/// verbatim repeats of training questions.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let world = generate_world_checked(config)?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, 0x5EED, 0));
    let mut chains = enumerate_chains(&world);
    chains.sort_by(|a, b| (&a.x, &a.r1, &a.b, &a.r2).cmp(&(&b.x, &b.r1, &b.b, &b.r2)));
    chains.shuffle(&mut split_rng);
    let mut pairs = enumerate_comparison_pairs(&world);
    pairs.sort_by(|a, b| (&a.x, &a.y, &a.attr).cmp(&(&b.x, &b.y, &b.attr)));
    pairs.shuffle(&mut split_rng);

    let (train_chains, dev_chains) = holdout_split(&chains);
    let (train_pairs, dev_pairs) = holdout_split(&pairs);

    let train = build_split(
        config, &world, "train", 1, config.n_train, train_chains, train_pairs,
    )?;
    let dev = build_split(config, &world, "dev", 2, config.n_dev, dev_chains, dev_pairs)?;

    let mut adv_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, 0xADD5, 0));
    let dev_adversarial: Vec<QAExample> = dev
        .iter()
        .filter(|e| e.qtype == QType::Bridge)
        .map(|e| inject_adversarial(e, &world, &mut adv_rng))
        .collect();

    Ok(Corpus {
        config: config.clone(),
        world,
        train,
        dev,
        dev_adversarial,
    })
}

fn generate_world_checked(config: &CorpusConfig) -> Result<World> {
    let world = super::world::generate_world(config)?;
    if enumerate_chains(&world).is_empty() {
        return Err(Error::Corpus("no 2-hop chain available in world".into()));
    }
    Ok(world)
}

/// 85/15 split with a fallback to sharing when a pool is too small to split.
fn holdout_split<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    if items.len() < 8 {
        return (items.to_vec(), items.to_vec());
    }
    let cut = (items.len() as f64 * 0.85).round() as usize;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

#[allow(clippy::too_many_arguments)]
fn build_split(
    config: &CorpusConfig,
    world: &World,
    split: &str,
    stream: u64,
    n: usize,
    chains: Vec<Chain>,
    pairs: Vec<ComparisonPair>,
) -> Result<Vec<QAExample>> {
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, stream, u64::MAX));
    let schedule = type_schedule(config, n, &mut schedule_rng);
    let span_pairs: Vec<&ComparisonPair> = pairs.iter().filter(|p| p.vx != p.vy).collect();
    let equal_pairs: Vec<&ComparisonPair> = pairs.iter().filter(|p| p.vx == p.vy).collect();

    let mut out = Vec::with_capacity(n);
    for (i, qtype) in schedule.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, stream, i as u64));
        let id = format!("{split}-{i:05}");
        let example = match qtype {
            QType::Bridge => {
                if chains.is_empty() {
                    return Err(Error::Corpus("no 2-hop chain available".into()));
                }
                let chain = &chains[rng.random_range(0..chains.len())];
                synthesize_bridge_from(world, config, chain, id, &mut rng)?
            }
            QType::ComparisonSpan => {
                if span_pairs.is_empty() {
                    return Err(Error::Corpus("no comparable attribute pair".into()));
                }
                let pair = span_pairs[rng.random_range(0..span_pairs.len())];
                synthesize_comparison_from(
                    world,
                    config,
                    pair,
                    ComparisonVariant::Span,
                    id,
                    &mut rng,
                )?
            }
            QType::ComparisonYn => {
                if pairs.is_empty() {
                    return Err(Error::Corpus("no comparable attribute pair".into()));
                }
                // The equal template wants equal-valued pairs to exist as
                // "yes" cases; steer a quarter of draws there when possible.
                let use_equal = !equal_pairs.is_empty() && rng.random::<f64>() < 0.125;
                let pair = if use_equal {
                    equal_pairs[rng.random_range(0..equal_pairs.len())]
                } else {
                    &pairs[rng.random_range(0..pairs.len())]
                };
                synthesize_comparison_from(world, config, pair, ComparisonVariant::Yn, id, &mut rng)?
            }
        };
        out.push(example);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_world;

    fn test_config() -> CorpusConfig {
        CorpusConfig {
            n_entities: 24,
            n_relations: 6,
            n_train: 60,
            n_dev: 24,
            seed: 11,
            ..CorpusConfig::default()
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bridge_question_matches_template_oracle() {
        // Independent regex oracle for the question surface form.
        let config = test_config();
        let world = generate_world(&config).unwrap();
        let example = synthesize_bridge(&world, &config, &mut rng(1)).unwrap();
        let re = regex::Regex::new(
            r"^what is the ([a-z]+) of the ([a-z]+) of ([a-z]{6}) \?$",
        )
        .unwrap();
        let caps = re.captures(&example.question).expect("template shape");
        let (r2, r1, x) = (&caps[1], &caps[2], &caps[3]);
        // The question mentions x and both relations; the chain resolves to
        // the span answer.
        let b = world.value_of(x, r1).unwrap();
        let a = world.value_of(b, r2).unwrap();
        assert_eq!(example.answer, Answer::Span(a.to_string()));
    }

    #[test]
    fn bridge_answer_is_in_exactly_one_supporting_sentence() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        for seed in 0..20 {
            let e = synthesize_bridge(&world, &config, &mut rng(seed)).unwrap();
            e.validate().unwrap();
            let answer = e.answer.as_text();
            let hits = e
                .supporting
                .iter()
                .filter(|(p, s)| crate::corpus::contains_word(&e.paragraphs[*p].sentences[*s], answer))
                .count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn bridge_subquestion2_contains_bridge_entity() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        let e = synthesize_bridge(&world, &config, &mut rng(3)).unwrap();
        let b = &e.sub_questions[0].answer;
        assert!(e.sub_questions[1].question.split_whitespace().any(|t| t == b));
    }

    #[test]
    fn bridge_entity_absent_from_question_and_distractors() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        for seed in 0..20 {
            let e = synthesize_bridge(&world, &config, &mut rng(seed)).unwrap();
            let b = e.sub_questions[0].answer.clone();
            assert!(!e.question.split_whitespace().any(|t| t == b));
            for (i, p) in e.paragraphs.iter().enumerate() {
                if e.gold_paragraph_indices.contains(&i) {
                    let mentions = p.sentences.iter().any(|s| crate::corpus::contains_word(s, &b))
                        || p.title == b;
                    assert!(mentions, "gold paragraph must mention the bridge entity");
                } else {
                    assert!(p.title != b);
                    for s in &p.sentences {
                        assert!(!crate::corpus::contains_word(s, &b), "distractor leaks bridge entity: {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn comparison_span_answer_agrees_with_numeric_oracle() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        for seed in 0..20 {
            let e =
                synthesize_comparison(&world, &config, ComparisonVariant::Span, &mut rng(seed))
                    .unwrap();
            // Oracle: recompute the comparison from the question and world.
            let re = regex::Regex::new(
                r"^which of ([a-z]{6}) and ([a-z]{6}) has the (greater|smaller) ([a-z]+) \?$",
            )
            .unwrap();
            let caps = re.captures(&e.question).expect("template shape");
            let vx: u32 = world.value_of(&caps[1], &caps[4]).unwrap().parse().unwrap();
            let vy: u32 = world.value_of(&caps[2], &caps[4]).unwrap().parse().unwrap();
            let winner = if (&caps[3] == "greater") == (vx > vy) {
                caps[1].to_string()
            } else {
                caps[2].to_string()
            };
            assert_eq!(e.answer, Answer::Span(winner));
        }
    }

    #[test]
    fn comparison_yn_answers_are_yes_or_no() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        for seed in 0..20 {
            let e = synthesize_comparison(&world, &config, ComparisonVariant::Yn, &mut rng(seed))
                .unwrap();
            assert!(matches!(e.answer, Answer::Yes | Answer::No));
        }
    }

    #[test]
    fn comparison_equal_values_with_equal_template_answer_yes() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        let pair = enumerate_comparison_pairs(&world)
            .into_iter()
            .find(|p| p.vx == p.vy)
            .expect("equal-valued pair exists in narrow value range");
        // Drive the template choice directly: equal template needs the rng to
        // land under 0.25; try seeds until it does.
        for seed in 0..200 {
            let mut r = rng(seed);
            let e = synthesize_comparison_from(
                &world,
                &config,
                &pair,
                ComparisonVariant::Yn,
                "t".into(),
                &mut r,
            )
            .unwrap();
            if e.question.contains(" equal to ") {
                assert_eq!(e.answer, Answer::Yes);
                return;
            }
        }
        panic!("no equal-template draw in 200 seeds");
    }

    #[test]
    fn adversarial_injection_replaces_subject_and_answer() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        let e = synthesize_bridge(&world, &config, &mut rng(5)).unwrap();
        let adv = inject_adversarial(&e, &world, &mut rng(6));
        let idx = adv.adversarial_paragraph_index.unwrap();
        assert!(!e.gold_paragraph_indices.contains(&idx));
        let injected = adv.paragraphs[idx].sentences.last().unwrap();
        let toks: Vec<&str> = injected.split_whitespace().collect();
        let [_, p2] = e.gold_paragraph_indices;
        let (_, s2) = *e.supporting.iter().find(|(p, _)| *p == p2).unwrap();
        let gold_toks: Vec<&str> =
            e.paragraphs[p2].sentences[s2].split_whitespace().collect();
        // Shares the relation phrase, differs in subject and answer.
        assert_eq!(toks[1], gold_toks[1]);
        assert_ne!(toks[3], gold_toks[3]);
        assert_ne!(toks[5], gold_toks[5]);
        // Original labels untouched.
        assert_eq!(adv.supporting, e.supporting);
        assert_eq!(adv.answer, e.answer);
        assert_eq!(adv.gold_paragraph_indices, e.gold_paragraph_indices);
    }

    #[test]
    fn adversarial_injection_is_noop_for_comparison() {
        let config = test_config();
        let world = generate_world(&config).unwrap();
        let e = synthesize_comparison(&world, &config, ComparisonVariant::Yn, &mut rng(7)).unwrap();
        let adv = inject_adversarial(&e, &world, &mut rng(8));
        assert_eq!(adv, e);
    }

    #[test]
    fn singlehop_dataset_doubles_examples_and_inherits_invariants() {
        let config = test_config();
        let corpus = generate_corpus(&config).unwrap();
        let items = derive_singlehop_dataset(&corpus.train, 4, 99);
        assert_eq!(items.len(), corpus.train.len() * 2);
        for item in &items {
            let gold = &item.paragraphs[item.gold_paragraph_index];
            let (p, s) = item.supporting;
            assert_eq!(p, item.gold_paragraph_index);
            assert!(crate::corpus::contains_word(&gold.sentences[s], &item.answer));
            // Distractors exclude the gold paragraph.
            let dup = item
                .paragraphs
                .iter()
                .filter(|q| q.title == gold.title)
                .count();
            assert_eq!(dup, 1);
        }
    }

    #[test]
    fn corpus_generation_is_pure_function_of_config() {
        let config = test_config();
        let a = generate_corpus(&config).unwrap();
        let b = generate_corpus(&config).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.dev_adversarial, b.dev_adversarial);
    }

    #[test]
    fn qtype_mixture_matches_configuration_exactly() {
        let mut config = test_config();
        config.n_train = 1000;
        config.n_entities = 40;
        let corpus = generate_corpus(&config).unwrap();
        let bridge = corpus.train.iter().filter(|e| e.qtype == QType::Bridge).count();
        let yn = corpus
            .train
            .iter()
            .filter(|e| e.qtype == QType::ComparisonYn)
            .count();
        let span = corpus
            .train
            .iter()
            .filter(|e| e.qtype == QType::ComparisonSpan)
            .count();
        // Exact allocation keeps the mixture within the +/-2% bound trivially.
        assert!((bridge as f64 / 1000.0 - 0.5).abs() <= 0.02);
        assert!((yn as f64 / 1000.0 - 0.25).abs() <= 0.02);
        assert!((span as f64 / 1000.0 - 0.25).abs() <= 0.02);
        assert_eq!(bridge + yn + span, 1000);
    }

    #[test]
    fn exactly_two_gold_among_n_candidates() {
        let config = test_config();
        let corpus = generate_corpus(&config).unwrap();
        for e in corpus.train.iter().chain(corpus.dev.iter()) {
            assert_eq!(e.paragraphs.len(), config.n_candidate_paragraphs);
            let [g1, g2] = e.gold_paragraph_indices;
            assert_ne!(g1, g2);
        }
    }
}
