//! Exact prompt text sent to the agent for fixed inputs. Set
//! `FEATURIST_UPDATE_GOLDEN=1` to rewrite the files after an intended change.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use featurist::hypothesis::{FeatureHypothesis, Generator, Origin, Trace};
use featurist::llm::{Gateway, LlmRequest, MockBackend};
use featurist::memory::{cross_task_hypotheses, SearchState, SummaryFeature, TaskSummary};
use featurist::prompts::PromptSet;
use featurist::search::reflect_and_rehypothesize;

const SCENE: &str = "Online reviews of running shoes, scored by helpful votes.";

fn recording(reply: &'static str) -> (Gateway, Arc<Mutex<Vec<String>>>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let gw = Gateway::mock(MockBackend::new().on("", move |r: &LlmRequest| {
        log.lock().unwrap().push(r.prompt.clone());
        reply
    }));
    (gw, seen)
}

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("FEATURIST_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "prompt drifted from {}", path.display());
}

#[test]
fn roles_prompt() {
    let (gw, seen) = recording("Fit expert, judges fit\nRunner, judges durability");
    let prompts = PromptSet::default();
    let g = Generator::new(&gw, &prompts);
    let roles = g.generate_roles(SCENE, 2, &mut Trace::default()).unwrap();
    assert_eq!(roles.len(), 2);
    check("generate_roles.txt", &seen.lock().unwrap()[0]);
}

#[test]
fn integrate_prompt() {
    let (gw, seen) = recording("Sizing advice, Whether the review says the shoe runs small or large");
    let prompts = PromptSet::default();
    let g = Generator::new(&gw, &prompts);
    let raw = vec![
        FeatureHypothesis::new("Sizing advice", "Whether the review says the shoe runs small or large", Origin::Role, 0),
        FeatureHypothesis::new("Fit guidance", "Mentions of sizing up or down", Origin::Positive, 0),
    ];
    let pool = g.integrate(&raw, &mut Trace::default()).unwrap();
    assert_eq!(pool.len(), 1);
    check("integrate_features.txt", &seen.lock().unwrap()[0]);
}

#[test]
fn reflection_prompt() {
    let (gw, seen) = recording("Mileage, How many miles the reviewer has run in the shoe");
    let prompts = PromptSet::default();
    let g = Generator::new(&gw, &prompts);
    let a = FeatureHypothesis::new("Sizing advice", "Whether the review says the shoe runs small or large", Origin::Role, 0);
    let b = FeatureHypothesis::new("Photos", "Whether the review mentions attached photos", Origin::Contrastive, 0);
    let mut state = SearchState::default();
    let out = reflect_and_rehypothesize(&g, &[(&b, 0.05), (&a, 0.3125)], SCENE, 1, &mut state, &mut Trace::default()).unwrap();
    assert_eq!(out[0].origin, Origin::Reflection);
    check("reflect_features.txt", &seen.lock().unwrap()[0]);
}

#[test]
fn cross_scene_prompt() {
    let (gw, seen) = recording("Arch support, Whether the review discusses arch support");
    let prompts = PromptSet::default();
    let g = Generator::new(&gw, &prompts);
    let summaries = vec![TaskSummary {
        scene_description: "Hotel reviews scored by helpful votes.".into(),
        final_features: vec![SummaryFeature {
            name: "Room details".into(),
            description: "Specific facts about the room".into(),
            mi: 0.21,
        }],
        joint_mi: 0.4,
        timestamp: 0,
        run_id: "abc".into(),
    }];
    let out = cross_task_hypotheses(&g, &summaries, SCENE, 1, &mut Trace::default()).unwrap();
    assert_eq!(out[0].origin, Origin::CrossTask);
    check("cross_scene.txt", &seen.lock().unwrap()[0]);
}
