//! Synthetic changing-priors benchmark: scenes of colored objects, templated
//! questions in three prefix categories, answer priors that differ between the
//! training and test splits, captions, and noisy region features.

mod io;

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{CaptionInstance, VqaInstance};
use crate::seed;
use crate::text::Vocabulary;

pub use io::{read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    YesNo,
    Number,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::YesNo, Category::Number, Category::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::YesNo => "yes/no",
            Category::Number => "number",
            Category::Other => "other",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synonym {
    pub answer: String,
    pub synonym: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Singular object names; plurals are formed by appending `s`.
    pub object_types: Vec<String>,
    pub colors: Vec<String>,
    /// Number answers are `1..=max_count`.
    pub max_count: usize,
    pub num_regions: usize,
    pub feature_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub sigma: f64,
    /// Sampling weights of yes/no, number and other questions.
    pub category_weights: [f64; 3],
    pub synonyms: Vec<Synonym>,
    pub embedding_seed: u64,
    /// Number of shared scenes that questions are asked about; 0 gives every
    /// question a scene of its own.
    #[serde(default)]
    pub scene_pool: usize,
    /// Leading share of the scene pool that test questions may use.
    #[serde(default = "default_test_scene_share")]
    pub test_scene_share: f64,
}

fn default_test_scene_share() -> f64 {
    0.5
}

impl Default for WorldSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        WorldSpec {
            object_types: s(&["ball", "cube", "cone", "ring", "star", "disk"]),
            colors: s(&["red", "blue", "green", "yellow", "purple", "orange"]),
            max_count: 4,
            num_regions: 6,
            feature_dim: 24,
            min_objects: 1,
            max_objects: 6,
            sigma: 0.05,
            category_weights: [1.0, 1.0, 1.0],
            synonyms: Vec::new(),
            embedding_seed: 0,
            scene_pool: 0,
            test_scene_share: default_test_scene_share(),
        }
    }
}

const COUNT_WORDS: [&str; 9] = ["a", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.object_types.is_empty() || self.colors.is_empty() {
            return fail("world needs object types and colors");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.num_regions {
            return fail("need 1 <= min_objects <= max_objects <= num_regions");
        }
        if self.max_objects > COUNT_WORDS.len() {
            return fail("too many objects per scene for caption count words");
        }
        if self.max_count == 0 || self.feature_dim == 0 {
            return fail("max_count and feature_dim must be positive");
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return fail("sigma must be a non-negative number");
        }
        if self.category_weights.iter().any(|w| *w < 0.0) || self.category_weights.iter().sum::<f64>() <= 0.0 {
            return fail("category weights must be non-negative and not all zero");
        }
        if !(self.test_scene_share > 0.0 && self.test_scene_share <= 1.0) {
            return fail("test_scene_share must lie in (0, 1]");
        }
        if self.scene_pool > 0 && self.test_scene_count() == 0 {
            return fail("scene pool leaves no scenes for test questions");
        }
        let answers = self.base_answers();
        for s in &self.synonyms {
            if !answers.contains(&s.answer) || answers.contains(&s.synonym) || !(0.0..=1.0).contains(&s.score) {
                return fail("synonyms must map an answer to a new word with a score in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn test_scene_count(&self) -> usize {
        (self.scene_pool as f64 * self.test_scene_share).round() as usize
    }

    pub fn plural(&self, kind: usize) -> String {
        format!("{}s", self.object_types[kind])
    }

    fn base_answers(&self) -> Vec<String> {
        let mut a = vec!["yes".to_string(), "no".to_string()];
        a.extend((1..=self.max_count).map(|c| c.to_string()));
        a.extend(self.colors.iter().cloned());
        a
    }

    /// Every answer string, indexed as the model's output units.
    pub fn answers(&self) -> Vec<String> {
        let mut a = self.base_answers();
        for s in &self.synonyms {
            if !a.contains(&s.synonym) {
                a.push(s.synonym.clone());
            }
        }
        a
    }

    /// Answer indices belonging to a category, in the order used by [`PriorShiftSpec`].
    pub fn category_answers(&self, category: Category) -> Vec<usize> {
        match category {
            Category::YesNo => vec![0, 1],
            Category::Number => (2..2 + self.max_count).collect(),
            Category::Other => (2 + self.max_count..2 + self.max_count + self.colors.len()).collect(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = ["is", "there", "how", "many", "are", "what", "color", "the", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(COUNT_WORDS[..self.max_objects].iter().map(|s| s.to_string()));
        for k in 0..self.object_types.len() {
            words.push(self.object_types[k].clone());
            words.push(self.plural(k));
        }
        words.extend(self.answers());
        Vocabulary::from_tokens(words)
    }

    /// Unit-norm embeddings of every object type followed by every color,
    /// rounded to 32-bit precision.
    pub fn concept_embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::stream(self.embedding_seed, "concepts", 0);
        (0..self.object_types.len() + self.colors.len())
            .map(|_| {
                let v: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| (x / n) as f32 as f64).collect()
            })
            .collect()
    }

    /// Noise-free region feature of one object: the mean of its type and color embeddings.
    pub fn object_embedding(&self, concepts: &[Vec<f64>], kind: usize, color: usize) -> Vec<f64> {
        let t = &concepts[kind];
        let c = &concepts[self.object_types.len() + color];
        t.iter().zip(c).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Per-category answer distributions for the training and test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorShiftSpec {
    /// Indexed by [`Category::index`]; each over `WorldSpec::category_answers`.
    pub train: [Vec<f64>; 3],
    pub test: [Vec<f64>; 3],
    pub delta_min: f64,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl PriorShiftSpec {
    /// Geometric priors with ratio `skew` on training, the same priors reversed on test.
    pub fn reversed(world: &WorldSpec, skew: f64, delta_min: f64) -> Self {
        let geo = |n: usize| {
            let w: Vec<f64> = (0..n).map(|i| skew.powi(i as i32)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let train = Category::ALL.map(|c| geo(world.category_answers(c).len()));
        let test = train.clone().map(|mut p| {
            p.reverse();
            p
        });
        PriorShiftSpec { train, test, delta_min }
    }

    pub fn desk(world: &WorldSpec) -> Self {
        Self::reversed(world, 0.5, 0.3)
    }

    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        for c in Category::ALL {
            let n = world.category_answers(c).len();
            for p in [&self.train[c.index()], &self.test[c.index()]] {
                let s: f64 = p.iter().sum();
                if p.len() != n || p.iter().any(|x| *x < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "`{c}` priors must be a distribution over {n} answers"
                    )));
                }
            }
            let tv = total_variation(&self.train[c.index()], &self.test[c.index()]);
            if tv < self.delta_min {
                return Err(Error::Config(format!(
                    "`{c}` train/test total variation {tv:.3} below {}",
                    self.delta_min
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: usize,
    pub color: usize,
    pub region: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn count(&self, kind: usize) -> usize {
        self.objects.iter().filter(|o| o.kind == kind).count()
    }

    pub fn contains(&self, kind: usize, color: usize) -> bool {
        self.objects.iter().any(|o| o.kind == kind && o.color == color)
    }

    /// Color of the object of this type, when exactly one is present.
    pub fn unique_color(&self, kind: usize) -> Option<usize> {
        let mut it = self.objects.iter().filter(|o| o.kind == kind);
        match (it.next(), it.next()) {
            (Some(o), None) => Some(o.color),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "template")]
pub enum Question {
    IsThere { color: usize, kind: usize },
    HowMany { kind: usize },
    WhatColor { kind: usize },
}

impl Question {
    pub fn category(&self) -> Category {
        match self {
            Question::IsThere { .. } => Category::YesNo,
            Question::HowMany { .. } => Category::Number,
            Question::WhatColor { .. } => Category::Other,
        }
    }

    pub fn render(&self, world: &WorldSpec) -> String {
        match *self {
            Question::IsThere { color, kind } => {
                format!("is there a {} {}", world.colors[color], world.object_types[kind])
            }
            Question::HowMany { kind } => format!("how many {} are there", world.plural(kind)),
            Question::WhatColor { kind } => format!("what color is the {}", world.object_types[kind]),
        }
    }

    /// Index into `world.answers()` of the correct answer, if the scene has one.
    pub fn answer(&self, world: &WorldSpec, scene: &Scene) -> Option<usize> {
        match *self {
            Question::IsThere { color, kind } => Some(if scene.contains(kind, color) { 0 } else { 1 }),
            Question::HowMany { kind } => {
                let n = scene.count(kind);
                (1..=world.max_count).contains(&n).then_some(1 + n)
            }
            Question::WhatColor { kind } => scene.unique_color(kind).map(|c| 2 + world.max_count + c),
        }
    }
}

/// Ground-truth score vector: 1 for the correct answer, the configured score
/// for its synonyms, 0 elsewhere (all zero when the scene has no answer).
pub fn answer_scores(world: &WorldSpec, scene: &Scene, question: &Question) -> Vec<f64> {
    let answers = world.answers();
    let mut scores = vec![0.0f64; answers.len()];
    if let Some(a) = question.answer(world, scene) {
        scores[a] = 1.0;
        for s in world.synonyms.iter().filter(|s| s.answer == answers[a]) {
            if let Some(j) = answers.iter().position(|x| *x == s.synonym) {
                scores[j] = scores[j].max(s.score);
            }
        }
    }
    scores
}

/// `[num_regions, feature_dim]` features: object embeddings in occupied
/// regions, zeros elsewhere, plus noise, rounded to 32-bit precision.
pub fn scene_features<R: Rng + ?Sized>(
    world: &WorldSpec,
    concepts: &[Vec<f64>],
    scene: &Scene,
    rng: &mut R,
) -> Result<Tensor> {
    let f = world.feature_dim;
    let mut data = vec![0.0; world.num_regions * f];
    for o in &scene.objects {
        data[o.region * f..(o.region + 1) * f].copy_from_slice(&world.object_embedding(concepts, o.kind, o.color));
    }
    if world.sigma > 0.0 {
        let noise = Normal::new(0.0, world.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for x in data.iter_mut() {
            *x += noise.sample(rng);
        }
    }
    for x in data.iter_mut() {
        *x = *x as f32 as f64;
    }
    Tensor::matrix(world.num_regions, f, data)
}

pub fn sample_scene<R: Rng + ?Sized>(world: &WorldSpec, image_id: u64, rng: &mut R) -> Scene {
    let n = rng.random_range(world.min_objects..=world.max_objects);
    let mut regions: Vec<usize> = (0..world.num_regions).collect();
    regions.shuffle(rng);
    let objects = regions[..n]
        .iter()
        .map(|&region| SceneObject {
            kind: rng.random_range(0..world.object_types.len()),
            color: rng.random_range(0..world.colors.len()),
            region,
        })
        .collect();
    Scene { image_id, objects }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: u64,
    pub category: Category,
    pub question: Question,
    pub scene: Scene,
    /// Index of the answer with score 1.
    pub answer: usize,
    pub instance: VqaInstance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionExample {
    pub image_id: u64,
    pub instance: CaptionInstance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 4000,
            val: 500,
            test: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub world: WorldSpec,
    pub shift: PriorShiftSpec,
    pub vocab: Vocabulary,
    pub answers: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub captions: Vec<CaptionExample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn test_image_ids(&self) -> HashSet<u64> {
        self.test.iter().map(|e| e.image_id).collect()
    }
}

const MAX_ATTEMPTS: usize = 20_000;

fn draw_question<R: Rng + ?Sized>(world: &WorldSpec, category: Category, rng: &mut R) -> Question {
    let kind = rng.random_range(0..world.object_types.len());
    match category {
        Category::YesNo => Question::IsThere {
            color: rng.random_range(0..world.colors.len()),
            kind,
        },
        Category::Number => Question::HowMany { kind },
        Category::Other => Question::WhatColor { kind },
    }
}

fn check_reachable(world: &WorldSpec, priors: &[Vec<f64>; 3]) -> Result<()> {
    for (i, &p) in priors[Category::Number.index()].iter().enumerate() {
        if p > 0.0 && i + 1 > world.max_objects {
            return Err(Error::Unreachable(Category::Number.label().into()));
        }
    }
    Ok(())
}

fn generate_example(
    world: &WorldSpec,
    concepts: &[Vec<f64>],
    vocab: &Vocabulary,
    cat_dist: &WeightedIndex<f64>,
    priors: &[Vec<f64>; 3],
    image_id: u64,
    rng: &mut impl Rng,
) -> Result<Example> {
    let category = Category::ALL[cat_dist.sample(rng)];
    let prior = &priors[category.index()];
    let target = world.category_answers(category)[WeightedIndex::new(prior)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(rng)];
    let question = draw_question(world, category, rng);
    for _ in 0..MAX_ATTEMPTS {
        let scene = sample_scene(world, image_id, rng);
        if question.answer(world, &scene) != Some(target) {
            continue;
        }
        let features = scene_features(world, concepts, &scene, rng)?;
        let instance = VqaInstance {
            question: vocab.encode(&question.render(world))?,
            features,
            answer_scores: answer_scores(world, &scene, &question),
        };
        return Ok(Example {
            image_id,
            category,
            question,
            scene,
            answer: target,
            instance,
        });
    }
    Err(Error::Unreachable(category.label().into()))
}

struct PooledScene {
    scene: Scene,
    features: Tensor,
}

fn generate_pooled_example(
    world: &WorldSpec,
    pool: &[PooledScene],
    vocab: &Vocabulary,
    cat_dist: &WeightedIndex<f64>,
    priors: &[Vec<f64>; 3],
    rng: &mut impl Rng,
) -> Result<Example> {
    let category = Category::ALL[cat_dist.sample(rng)];
    let prior = &priors[category.index()];
    let target = world.category_answers(category)[WeightedIndex::new(prior)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(rng)];
    for _ in 0..MAX_ATTEMPTS {
        let p = &pool[rng.random_range(0..pool.len())];
        let question = draw_question(world, category, rng);
        if question.answer(world, &p.scene) != Some(target) {
            continue;
        }
        let instance = VqaInstance {
            question: vocab.encode(&question.render(world))?,
            features: p.features.clone(),
            answer_scores: answer_scores(world, &p.scene, &question),
        };
        return Ok(Example {
            image_id: p.scene.image_id,
            category,
            question,
            scene: p.scene.clone(),
            answer: target,
            instance,
        });
    }
    Err(Error::Unreachable(category.label().into()))
}

/// Samples the three splits. Each instance draws its category, then its answer
/// from the split's prior, then rejection-samples scenes until that answer holds.
pub fn generate(world: &WorldSpec, shift: &PriorShiftSpec, sizes: SplitSizes, seed: u64) -> Result<SyntheticDataset> {
    world.validate()?;
    shift.validate(world)?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    check_reachable(world, &shift.train)?;
    check_reachable(world, &shift.test)?;
    let concepts = world.concept_embeddings();
    let vocab = world.vocabulary();
    let cat_dist = WeightedIndex::new(world.category_weights).map_err(|e| Error::Config(e.to_string()))?;
    if world.scene_pool > 0 {
        let pool = (0..world.scene_pool)
            .map(|i| {
                let mut rng = seed::stream(seed, "scenes", i as u64);
                let scene = sample_scene(world, i as u64, &mut rng);
                let features = scene_features(world, &concepts, &scene, &mut rng)?;
                Ok(PooledScene { scene, features })
            })
            .collect::<Result<Vec<_>>>()?;
        let test_pool = &pool[..world.test_scene_count()];
        let make = |split: Split, n: usize, pool: &[PooledScene], priors: &[Vec<f64>; 3]| -> Result<Vec<Example>> {
            (0..n)
                .map(|i| {
                    let mut rng = seed::stream(seed, split.name(), i as u64);
                    generate_pooled_example(world, pool, &vocab, &cat_dist, priors, &mut rng)
                })
                .collect()
        };
        return Ok(SyntheticDataset {
            world: world.clone(),
            shift: shift.clone(),
            answers: world.answers(),
            train: make(Split::Train, sizes.train, &pool, &shift.train)?,
            val: make(Split::Val, sizes.val, &pool, &shift.train)?,
            test: make(Split::Test, sizes.test, test_pool, &shift.test)?,
            vocab,
            captions: Vec::new(),
        });
    }
    let mut next_id = 0u64;
    let mut make = |split: Split, n: usize, priors: &[Vec<f64>; 3]| -> Result<Vec<Example>> {
        (0..n)
            .map(|i| {
                let id = next_id;
                next_id += 1;
                let mut rng = seed::stream(seed, split.name(), i as u64);
                generate_example(world, &concepts, &vocab, &cat_dist, priors, id, &mut rng)
            })
            .collect()
    };
    let train = make(Split::Train, sizes.train, &shift.train)?;
    let val = make(Split::Val, sizes.val, &shift.train)?;
    let test = make(Split::Test, sizes.test, &shift.test)?;
    Ok(SyntheticDataset {
        world: world.clone(),
        shift: shift.clone(),
        answers: world.answers(),
        vocab,
        train,
        val,
        test,
        captions: Vec::new(),
    })
}

/// "a red ball and two blue cubes": object groups in order of first appearance.
pub fn caption_text(world: &WorldSpec, scene: &Scene) -> String {
    let mut groups: Vec<((usize, usize), usize)> = Vec::new();
    for o in &scene.objects {
        match groups.iter_mut().find(|(k, _)| *k == (o.kind, o.color)) {
            Some((_, n)) => *n += 1,
            None => groups.push(((o.kind, o.color), 1)),
        }
    }
    groups
        .iter()
        .map(|&((kind, color), n)| {
            let noun = if n == 1 { world.object_types[kind].clone() } else { world.plural(kind) };
            format!("{} {} {}", COUNT_WORDS[n - 1], world.colors[color], noun)
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Caption pool of up to `size` scenes drawn from the training and validation
/// splits, one caption each, paired with the scene's features.
pub fn generate_captions(dataset: &SyntheticDataset, size: usize, seed: u64) -> Result<Vec<CaptionExample>> {
    let world = &dataset.world;
    let test_ids = dataset.test_image_ids();
    let mut pool: Vec<&Example> = dataset
        .train
        .iter()
        .chain(&dataset.val)
        .filter(|e| !test_ids.contains(&e.image_id))
        .collect();
    pool.sort_by_key(|e| e.image_id);
    pool.dedup_by_key(|e| e.image_id);
    let mut rng = seed::stream(seed, "captions", 0);
    pool.shuffle(&mut rng);
    pool.truncate(size);
    pool.sort_by_key(|e| e.image_id);
    pool.into_iter()
        .map(|e| {
            Ok(CaptionExample {
                image_id: e.image_id,
                instance: CaptionInstance {
                    caption: dataset.vocab.encode(&caption_text(world, &e.scene))?,
                    features: e.instance.features.clone(),
                },
            })
        })
        .collect()
}

/// Caption pool size of the default dataset.
pub const DESK_CAPTIONS: usize = 2000;

/// The default benchmark: default world and shift, default split sizes and a
/// caption pool of [`DESK_CAPTIONS`].
pub fn desk_dataset(seed: u64) -> Result<SyntheticDataset> {
    let world = WorldSpec::default();
    let mut ds = generate(&world, &PriorShiftSpec::desk(&world), SplitSizes::default(), seed)?;
    ds.captions = generate_captions(&ds, DESK_CAPTIONS, seed)?;
    Ok(ds)
}
