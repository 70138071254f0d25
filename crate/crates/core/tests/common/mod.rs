#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sdoh_core::encoding::{
    assemble_matrix, binarize_outcomes, one_hot_snapshots, stratified_split, FeatureGroup, FeatureMatrix,
    RaceEthnicity, Sex, LISTED_OUTCOME,
};
use sdoh_core::gbm::{Node, Tree};
use sdoh_core::questionnaire::{Questionnaire, Role};
use sdoh_core::synth::{
    demo_feature_columns, ClampedNormal, ClinicalSpec, CohortSpec, FactorSpec, GroupSpec, LogisticModel,
    OutcomeSpec, SynthOutput, YearRange,
};

/// Random tree with consistent covers. Thresholds and row values both live
/// in [0, 1].
pub fn random_tree(rng: &mut impl Rng, max_depth: usize, n_features: usize) -> Tree {
    fn grow(rng: &mut impl Rng, nodes: &mut Vec<Node>, depth: usize, max_depth: usize, n_features: usize) -> usize {
        let at = nodes.len();
        if depth == max_depth || (depth > 0 && rng.random::<f64>() < 0.25) {
            nodes.push(Node::Leaf {
                value: rng.random_range(-2.0..2.0),
                cover: rng.random_range(1.0..100.0_f64).round(),
            });
            return at;
        }
        nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
        let left = grow(rng, nodes, depth + 1, max_depth, n_features);
        let right = grow(rng, nodes, depth + 1, max_depth, n_features);
        let cover = nodes[left].cover() + nodes[right].cover();
        nodes[at] = Node::Split {
            feature: rng.random_range(0..n_features),
            threshold: rng.random_range(0.0..1.0),
            default_left: rng.random(),
            left,
            right,
            cover,
        };
        at
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, 0, max_depth, n_features);
    Tree { nodes }
}

pub fn random_row(rng: &mut impl Rng, n_features: usize) -> Vec<f64> {
    (0..n_features)
        .map(|_| if rng.random::<f64>() < 0.1 { f64::NAN } else { rng.random() })
        .collect()
}

pub struct ListingData {
    pub train: FeatureMatrix,
    pub train_labels: Vec<bool>,
    pub test: FeatureMatrix,
    pub test_labels: Vec<bool>,
}

/// Encodes a synthetic cohort from its planted answers and returns an 80/20
/// stratified split of the listing outcome over `columns`.
pub fn listing_split(out: &SynthOutput, q: &Questionnaire, columns: &[String], seed: u64) -> ListingData {
    let block = one_hot_snapshots(&out.truth.answers, q, &[Role::Sdoh]);
    let m = assemble_matrix(
        &out.cohort,
        Some(&block),
        &[FeatureGroup::Clinical, FeatureGroup::Demographic, FeatureGroup::Sdoh],
    )
    .unwrap()
    .matrix;
    let cols: Vec<usize> = columns.iter().map(|c| m.require_column(c).unwrap()).collect();
    let m = m.select_columns(&cols);
    let outcomes = binarize_outcomes(&out.cohort, &out.truth.answers);
    let (rows, labels) = outcomes[LISTED_OUTCOME].align(&m);
    let m = m.select_rows(&rows);
    let split = stratified_split(&labels, 0.2, seed).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    ListingData {
        train: m.select_rows(&split.train),
        train_labels: pick(&split.train),
        test: m.select_rows(&split.test),
        test_labels: pick(&split.test),
    }
}

pub fn demo_columns() -> Vec<String> {
    demo_feature_columns()
}

/// Four race groups by two sexes, 500 patients each. Mental-health issues
/// (q8) are planted higher in women; current alcohol use (q13) higher in
/// Black and lower in Hispanic patients. Everything else is balanced.
pub fn disparity_spec() -> CohortSpec {
    let races = [
        RaceEthnicity::NonHispanicWhite,
        RaceEthnicity::Black,
        RaceEthnicity::Hispanic,
        RaceEthnicity::Asian,
    ];
    let mut groups = Vec::new();
    for race in races {
        for sex in Sex::ALL {
            groups.push(GroupSpec {
                label: format!("{}/{}", race.as_str(), sex.as_str()),
                size: 500,
                race,
                sex,
                meld_shift: 0.0,
            });
        }
    }
    let by_group = |f: &dyn Fn(&GroupSpec) -> Option<f64>| -> BTreeMap<String, f64> {
        groups.iter().filter_map(|g| f(g).map(|p| (g.label.clone(), p))).collect()
    };
    let factors = vec![
        FactorSpec {
            question: 8,
            present: "Yes".into(),
            absent: "No".into(),
            base_prevalence: 0.22,
            group_prevalence: by_group(&|g| (g.sex == Sex::Female).then_some(0.35)),
            drift_per_year: 0.0,
            unknown_rate: 0.0,
        },
        FactorSpec {
            question: 13,
            present: "Yes".into(),
            absent: "No".into(),
            base_prevalence: 0.25,
            group_prevalence: by_group(&|g| match g.race {
                RaceEthnicity::Black => Some(0.37),
                RaceEthnicity::Hispanic => Some(0.13),
                _ => None,
            }),
            drift_per_year: 0.0,
            unknown_rate: 0.0,
        },
    ];
    let coefficients = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    CohortSpec {
        name: "disparity".into(),
        years: YearRange { start: 2012, end: 2023 },
        groups,
        factors,
        clinical: ClinicalSpec {
            meld: ClampedNormal { mean: 19.0, sd: 7.0, min: 6.0, max: 40.0 },
            bmi: ClampedNormal { mean: 28.5, sd: 5.5, min: 16.0, max: 50.0 },
            age: ClampedNormal { mean: 56.0, sd: 10.0, min: 18.0, max: 80.0 },
            hcc_rate: 0.25,
        },
        outcomes: OutcomeSpec {
            rec: LogisticModel {
                intercept: 3.0,
                coefficients: BTreeMap::new(),
            },
            listed: LogisticModel {
                intercept: 8.5,
                coefficients: coefficients(&[
                    ("meld", 0.1),
                    ("hcc", 1.0),
                    ("bmi", -0.1),
                    ("age", -0.06),
                    ("q8=Yes", -1.0),
                    ("q13=Yes", -1.2),
                ]),
            },
            provisional_fraction: 0.1,
        },
        note_templates: BTreeMap::new(),
    }
}
