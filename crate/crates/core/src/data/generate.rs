use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{
    render_image, tier_band_rows, tier_word, Band, Color, Concept, Direction, Image, Placed,
    Raster, Scene, Shape, View, NOT_VISIBLE,
};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    View,
    Visibility,
    Quality,
    Feasibility,
    Guidance,
}

impl QType {
    pub const ALL: [QType; 5] = [
        QType::View,
        QType::Visibility,
        QType::Quality,
        QType::Feasibility,
        QType::Guidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QType::View => "view",
            QType::Visibility => "visibility",
            QType::Quality => "quality",
            QType::Feasibility => "feasibility",
            QType::Guidance => "guidance",
        }
    }

    pub fn answer_class(self) -> AnswerClass {
        match self {
            QType::Guidance => AnswerClass::Open,
            _ => AnswerClass::Closed,
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerClass {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

/// One question-answer pair about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    pub id: String,
    pub image_id: String,
    pub image: Arc<Image>,
    pub question: String,
    pub question_ids: Vec<usize>,
    pub answer: String,
    pub answer_ids: Vec<usize>,
    pub qtype: QType,
    pub answer_class: AnswerClass,
    /// Quality category, 1 (best) to 5.
    pub tier: u8,
    pub split: Split,
}

/// Image-caption pair for the alignment stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub image_id: String,
    pub image: Arc<Image>,
    pub caption: String,
    pub caption_ids: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub image: Arc<Image>,
    pub provenance: String,
}

/// Generator settings. The seed fixes the whole corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub grid: usize,
    pub image_size: usize,
    pub channels: usize,
    pub colors: Vec<Color>,
    pub shapes: Vec<Shape>,
    pub views: Vec<View>,
    pub target: Concept,
    pub target_rate: f64,
    pub max_distractors: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 4,
            image_size: 32,
            channels: 3,
            colors: vec![Color::Red, Color::Green, Color::Blue],
            shapes: vec![Shape::Circle, Shape::Square],
            views: vec![View::Apical, View::Parasternal, View::Subcostal],
            target: Concept {
                color: Color::Red,
                shape: Shape::Circle,
            },
            target_rate: 0.7,
            max_distractors: 2,
            train_images: 2000,
            val_images: 40,
            test_images: 100,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn raster(&self) -> Raster {
        Raster {
            grid: self.grid,
            size: self.image_size,
            channels: self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || self.grid > 10 || self.image_size % self.grid != 0 {
            return bad(format!(
                "grid {} must be in 1..=10 and divide image_size {}",
                self.grid, self.image_size
            ));
        }
        if self.channels != 3 {
            return bad(format!("channels must be 3, got {}", self.channels));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.views.is_empty() {
            return bad("colors, shapes and views must be non-empty".into());
        }
        if !self.colors.contains(&self.target.color) || !self.shapes.contains(&self.target.shape) {
            return bad(format!("target {} outside the alphabets", self.target.phrase()));
        }
        if self.colors.len() * self.shapes.len() < 2 {
            return bad("need at least two concepts".into());
        }
        if self.max_distractors + 1 > self.grid * self.grid {
            return bad("too many objects for the grid".into());
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return bad("target_rate must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn concepts(&self) -> Vec<Concept> {
        let mut out = Vec::new();
        for &color in &self.colors {
            for &shape in &self.shapes {
                out.push(Concept { color, shape });
            }
        }
        out
    }

    pub fn images_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Val => self.val_images,
            Split::Test => self.test_images,
        }
    }

    fn centre(&self) -> usize {
        (self.grid - 1) / 2
    }
}

/// A generated scene together with everything derived from it.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub image_id: String,
    pub split: Split,
    pub scene: Scene,
    pub tier: u8,
    pub noise_seed: u64,
    pub image: Arc<Image>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<VqaSample>,
    pub captions: Vec<CaptionSample>,
    pub exemplars: BTreeMap<String, Exemplar>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<VqaSample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }

    pub fn captions_in(&self, split: Split) -> Vec<CaptionSample> {
        self.captions
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }
}

pub(crate) fn mix(mut x: u64) -> u64 {
    // splitmix64 finaliser
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed ^ (split as u64 + 1).wrapping_mul(0x1000_0000_01b3)) ^ index as u64)
}

/// Samples one scene. Deterministic in `(spec, split, index)`.
pub fn sample_scene(spec: &SyntheticSpec, split: Split, index: usize) -> SceneRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, split, index));
    let view = spec.views[rng.random_range(0..spec.views.len())];
    let tier: u8 = rng.random_range(1..=5);
    let mut cells: Vec<(usize, usize)> = (0..spec.grid)
        .flat_map(|r| (0..spec.grid).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);
    let mut cells = cells.into_iter();
    let mut objects = Vec::new();
    if rng.random_bool(spec.target_rate) {
        let (row, col) = cells.next().expect("grid has cells");
        objects.push(Placed {
            concept: spec.target,
            row,
            col,
        });
    }
    let others: Vec<Concept> = spec
        .concepts()
        .into_iter()
        .filter(|c| *c != spec.target)
        .collect();
    let n = rng.random_range(0..=spec.max_distractors);
    for _ in 0..n {
        let (row, col) = cells.next().expect("validated object count");
        objects.push(Placed {
            concept: others[rng.random_range(0..others.len())],
            row,
            col,
        });
    }
    let band_rows = tier_band_rows(tier).min(spec.grid);
    let band = (band_rows > 0).then(|| Band {
        start_row: rng.random_range(0..=spec.grid - band_rows),
        rows: band_rows,
    });
    let noise_seed: u64 = rng.random();
    let scene = Scene {
        view,
        objects,
        band,
    };
    let image = Arc::new(render_image(&scene, tier, spec.raster(), noise_seed));
    SceneRecord {
        image_id: format!("{}-{index:05}", split.name()),
        split,
        scene,
        tier,
        noise_seed,
        image,
    }
}

/// Ground-truth answer for a question type, computed from the scene alone.
pub fn answer_for(spec: &SyntheticSpec, rec: &SceneRecord, qtype: QType, asked: Concept) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    match qtype {
        QType::View => rec.scene.view.word().to_string(),
        QType::Visibility => yn(rec.scene.concept_visible(asked)),
        QType::Quality => yn(rec.tier <= 2),
        QType::Feasibility => yn(rec.tier <= 2 && rec.scene.concept_visible(spec.target)),
        QType::Guidance => rec
            .scene
            .guidance(spec.target, spec.grid)
            .map_or(NOT_VISIBLE, Direction::phrase)
            .to_string(),
    }
}

pub fn question_for(qtype: QType, asked: Concept) -> String {
    match qtype {
        QType::View => "which view is shown".into(),
        QType::Visibility => format!("is a {} visible", asked.phrase()),
        QType::Quality => "is the image quality sufficient".into(),
        QType::Feasibility => "can the target be measured".into(),
        QType::Guidance => "how should the probe move".into(),
    }
}

/// Concept asked about by the visibility question: a visible one half of
/// the time (when any is visible), otherwise one that is not visible.
fn visibility_concept(spec: &SyntheticSpec, rec: &SceneRecord) -> Concept {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(rec.noise_seed ^ 0x5eed));
    let visible: Vec<Concept> = rec
        .scene
        .objects
        .iter()
        .filter(|p| !rec.scene.occluded(p.row))
        .map(|p| p.concept)
        .collect();
    if !visible.is_empty() && rng.random_bool(0.5) {
        return visible[rng.random_range(0..visible.len())];
    }
    let hidden: Vec<Concept> = spec
        .concepts()
        .into_iter()
        .filter(|c| !rec.scene.concept_visible(*c))
        .collect();
    hidden[rng.random_range(0..hidden.len())]
}

pub fn caption_for(rec: &SceneRecord) -> String {
    let visible: Vec<&Placed> = rec
        .scene
        .objects
        .iter()
        .filter(|p| !rec.scene.occluded(p.row))
        .collect();
    let tail = format!("on a {} {} image", tier_word(rec.tier), rec.scene.view.word());
    if visible.is_empty() {
        return format!("no structure visible {tail}");
    }
    let parts: Vec<String> = visible
        .iter()
        .map(|p| {
            format!(
                "a {} at row {} column {}",
                p.concept.phrase(),
                p.row,
                p.col
            )
        })
        .collect();
    format!("{} {tail}", parts.join(" and "))
}

fn samples_for(
    spec: &SyntheticSpec,
    rec: &SceneRecord,
    tok: &Tokenizer,
) -> Result<(Vec<VqaSample>, CaptionSample)> {
    let asked = visibility_concept(spec, rec);
    let mut out = Vec::with_capacity(QType::ALL.len());
    for qtype in QType::ALL {
        let question = question_for(qtype, asked);
        let answer = answer_for(spec, rec, qtype, asked);
        out.push(VqaSample {
            id: format!("{}-{}", rec.image_id, qtype.name()),
            image_id: rec.image_id.clone(),
            image: rec.image.clone(),
            question_ids: tok.encode(&question)?,
            answer_ids: tok.encode(&answer)?,
            question,
            answer,
            qtype,
            answer_class: qtype.answer_class(),
            tier: rec.tier,
            split: rec.split,
        });
    }
    let caption = caption_for(rec);
    let cap = CaptionSample {
        image_id: rec.image_id.clone(),
        image: rec.image.clone(),
        caption_ids: tok.encode(&caption)?,
        caption,
        split: rec.split,
    };
    Ok((out, cap))
}

/// Canonical scene for every term the vocabulary can contain.
pub fn exemplar_scenes(spec: &SyntheticSpec) -> BTreeMap<String, (Scene, u8, String)> {
    let c = spec.centre();
    let g = spec.grid;
    let v0 = spec.views[0];
    let target_at = |row, col| Scene {
        view: v0,
        objects: vec![Placed {
            concept: spec.target,
            row,
            col,
        }],
        band: None,
    };
    let mut out = BTreeMap::new();
    let mut put = |term: String, scene: Scene, tier: u8, why: String| {
        out.insert(term, (scene, tier, why));
    };
    let t = spec.target.phrase();
    put(
        "yes".into(),
        target_at(c, c),
        1,
        format!("clean {t} at centre"),
    );
    put(
        "no".into(),
        Scene {
            view: v0,
            objects: vec![],
            band: Some(Band {
                start_row: 0,
                rows: tier_band_rows(5).min(g),
            }),
        },
        5,
        "empty tier-5 image".into(),
    );
    put(NOT_VISIBLE.into(), Scene::empty(v0), 1, "clean empty image".into());
    for (d, (row, col)) in [
        (Direction::Centered, (c, c)),
        (Direction::Left, (c, 0)),
        (Direction::Right, (c, g - 1)),
        (Direction::Up, (0, c)),
        (Direction::Down, (g - 1, c)),
    ] {
        put(
            d.phrase().into(),
            target_at(row, col),
            1,
            format!("{t} at row {row} column {col}"),
        );
    }
    for &view in &spec.views {
        put(
            view.word().into(),
            Scene::empty(view),
            1,
            format!("empty {} background", view.word()),
        );
    }
    for &color in &spec.colors {
        let objects = spec
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| Placed {
                concept: Concept { color, shape },
                row: c,
                col: i % g,
            })
            .collect();
        put(
            color.word().into(),
            Scene {
                view: v0,
                objects,
                band: None,
            },
            1,
            format!("every {} shape in row {c}", color.word()),
        );
    }
    for &shape in &spec.shapes {
        let objects = spec
            .colors
            .iter()
            .enumerate()
            .map(|(i, &color)| Placed {
                concept: Concept { color, shape },
                row: c,
                col: i % g,
            })
            .collect();
        put(
            shape.word().into(),
            Scene {
                view: v0,
                objects,
                band: None,
            },
            1,
            format!("every colour of {} in row {c}", shape.word()),
        );
    }
    out
}

pub fn render_exemplars(spec: &SyntheticSpec) -> BTreeMap<String, Exemplar> {
    exemplar_scenes(spec)
        .into_iter()
        .map(|(term, (scene, tier, why))| {
            let image = Arc::new(render_image(&scene, tier, spec.raster(), 0));
            let provenance = format!("exemplar image: {why}");
            (term, Exemplar { image, provenance })
        })
        .collect()
}

/// Builds the whole corpus. Output order is sorted by identifier, so the
/// execution mode cannot change it.
pub fn generate_dataset(spec: &SyntheticSpec, exec: Execution) -> Result<Corpus> {
    spec.validate()?;
    let tok = Tokenizer::new();
    let mut jobs = Vec::new();
    for split in Split::ALL {
        for i in 0..spec.images_in(split) {
            jobs.push((split, i));
        }
    }
    let scenes: Vec<SceneRecord> =
        parallel::map(exec, &jobs, |&(split, i)| sample_scene(spec, split, i));
    let mut samples = Vec::new();
    let mut captions = Vec::new();
    for rec in &scenes {
        let (qa, cap) = samples_for(spec, rec, &tok)?;
        samples.extend(qa);
        captions.push(cap);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    captions.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(Corpus {
        spec: spec.clone(),
        scenes,
        samples,
        captions,
        exemplars: render_exemplars(spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_images: 40,
            val_images: 5,
            test_images: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn tier1_target_at_centre() {
        let spec = small();
        let rec = SceneRecord {
            image_id: "x".into(),
            split: Split::Train,
            scene: Scene {
                view: View::Apical,
                objects: vec![Placed {
                    concept: spec.target,
                    row: 1,
                    col: 2,
                }],
                band: None,
            },
            tier: 1,
            noise_seed: 0,
            image: Arc::new(Image::filled(3, 32, 32, 0.0)),
        };
        assert_eq!(answer_for(&spec, &rec, QType::Feasibility, spec.target), "yes");
        assert_eq!(answer_for(&spec, &rec, QType::Guidance, spec.target), "centered");
    }

    #[test]
    fn tier5_is_never_feasible() {
        let spec = small();
        let corpus = generate_dataset(&spec, Execution::Sequential).unwrap();
        let tier5: Vec<_> = corpus.samples.iter().filter(|s| s.tier == 5).collect();
        assert!(!tier5.is_empty());
        for s in tier5 {
            if matches!(s.qtype, QType::Quality | QType::Feasibility) {
                assert_eq!(s.answer, "no", "{}", s.id);
            }
        }
    }

    #[test]
    fn regeneration_is_identical_and_split_sizes_exact() {
        let spec = small();
        let a = generate_dataset(&spec, Execution::Parallel).unwrap();
        let b = generate_dataset(&spec, Execution::Sequential).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.split(Split::Train).len(), 40 * 5);
        assert_eq!(a.split(Split::Val).len(), 5 * 5);
        assert_eq!(a.split(Split::Test).len(), 10 * 5);
        assert_eq!(a.captions.len(), 55);
    }

    #[test]
    fn tokens_round_trip() {
        let corpus = generate_dataset(&small(), Execution::Sequential).unwrap();
        let tok = Tokenizer::new();
        for s in &corpus.samples {
            assert_eq!(tok.decode(&s.question_ids), s.question);
            assert_eq!(tok.decode(&s.answer_ids), s.answer);
        }
        for c in &corpus.captions {
            assert_eq!(tok.decode(&c.caption_ids), c.caption);
        }
    }

    #[test]
    fn exemplar_scenes_answer_their_own_term() {
        let spec = SyntheticSpec::default();
        let ex = exemplar_scenes(&spec);
        for d in [
            Direction::Centered,
            Direction::Left,
            Direction::Right,
            Direction::Up,
            Direction::Down,
        ] {
            let (scene, _, _) = &ex[d.phrase()];
            assert_eq!(scene.guidance(spec.target, spec.grid), Some(d));
        }
        assert!(ex.contains_key("red") && ex.contains_key("circle"));
    }

    #[test]
    fn bad_spec_is_config_error() {
        let spec = SyntheticSpec {
            grid: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_dataset(&spec, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }
}
