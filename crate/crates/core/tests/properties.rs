use mug_core::agent::{build_decoder_input, select_action, training_returns, Model, ModelConfig, Variant, encode_screen};
use mug_core::encoder::{embed_text, raster_features, rasterize, roi_pool, screen_features, RASTER_CHANNELS};
use mug_core::eval::{
    f1_at, gamma, has_duplicate_action, run_online_episode, GammaFilter, OnlineOptions, RandomAgent, SubsetReport,
};
use mug_core::generator::{
    challenging_subset, generate_corpus, generate_gold_session, generate_screen, split_corpus, CorpusConfig, GeneratorConfig,
    GoldStyle,
};
use mug_core::io::{session_from_line, session_to_line};
use mug_core::screen::{validate_screen, validate_session, BBox, ObjType, Screen, UiObject, MAX_COMMAND_TOKENS, MAX_TURNS};
use mug_core::tensor::Tensor;
use mug_core::usersim::{descriptor, heuristic_followup, spatial_phrase, SpatialMode, UserKind};
use mug_core::vocab::Vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.95f64, 0.0..0.95f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
        BBox::new(x, y, (x + w * (1.0 - x)).max(x + 1e-3).min(1.0), (y + h * (1.0 - y)).max(y + 1e-3).min(1.0))
    })
}

fn object(index: usize, bbox: BBox, ty: usize, clickable: bool, leaf: bool) -> UiObject {
    UiObject {
        index,
        bbox,
        obj_type: ObjType::ALL[ty % ObjType::COUNT],
        clickable,
        leaf,
        text: vec![],
        resource_id: vec![],
        dom_pre: index,
        dom_post: index,
    }
}

fn one_object_screen(o: UiObject) -> Screen {
    Screen { screen_id: "p".into(), app_id: "a".into(), width_px: 1080, height_px: 1920, objects: vec![o] }
}

fn target_and_style(screen: &Screen, seed: u64) -> (usize, GoldStyle) {
    let clickable = screen.clickable_indices();
    let g = clickable[(seed as usize / 7) % clickable.len()];
    let style = match seed % 4 {
        0 => GoldStyle::OneTurn,
        k => GoldStyle::AmbiguousMultiTurn(k as usize + 1),
    };
    (g, style)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gold_sessions_are_valid(seed in any::<u64>()) {
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        prop_assert!(validate_screen(&screen, Some(&Vocab::bundled())).is_empty());
        let (g, style) = target_and_style(&screen, seed);
        if let Ok(s) = generate_gold_session(&screen, g, seed, style) {
            prop_assert!(validate_session(&s, &screen).is_empty(), "{:?}", validate_session(&s, &screen));
            prop_assert!(s.completed);
            prop_assert_eq!(s.turns.last().unwrap().action, g);
        }
    }

    #[test]
    fn session_lines_round_trip(seed in any::<u64>()) {
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        let (g, style) = target_and_style(&screen, seed);
        let s = generate_gold_session(&screen, g, seed, style).or_else(|_| generate_gold_session(&screen, g, seed, GoldStyle::OneTurn)).unwrap();
        let line = session_to_line(&s);
        let back = session_from_line(&line).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(session_to_line(&back), line);
    }

    #[test]
    fn select_action_respects_masks(
        logits in prop::collection::vec(-5.0..5.0f64, 1..40),
        forbid_bits in any::<u64>(),
        nonclick_bits in any::<u64>(),
    ) {
        let n = logits.len();
        let forbidden: Vec<usize> = (0..n).filter(|i| forbid_bits >> (i % 64) & 1 == 1 && i % 3 == 0).collect();
        let non_clickable: Vec<usize> = (0..n).filter(|i| nonclick_bits >> (i % 64) & 1 == 1 && i % 3 != 0).collect();
        let allowed: Vec<usize> = (0..n).filter(|i| !forbidden.contains(i) && !non_clickable.contains(i)).collect();
        match select_action(&logits, &forbidden, &non_clickable) {
            Ok(a) => {
                prop_assert!(allowed.contains(&a));
                prop_assert!(allowed.iter().all(|&j| logits[j] < logits[a] || (logits[j] == logits[a] && j >= a)));
            }
            Err(_) => prop_assert!(allowed.is_empty()),
        }
    }

    #[test]
    fn raster_mass_is_conserved(b in bbox(), ty in 0usize..10, clickable: bool, leaf: bool, h in 1usize..20, w in 1usize..20) {
        let o = object(0, b, ty, clickable, leaf);
        let f = raster_features(&o);
        let grid = rasterize(&one_object_screen(o), h, w);
        let cell_area = 1.0 / (h * w) as f64;
        for c in 0..RASTER_CHANNELS {
            let mass: f64 = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| grid.cell(i, j)[c] * cell_area).sum();
            prop_assert!((mass - b.area() * f[c]).abs() <= 1e-9, "channel {c}: {mass} vs {}", b.area() * f[c]);
        }
    }

    #[test]
    fn roi_pool_matches_cell_enumeration(seed in any::<u64>(), b in bbox(), h in 1usize..20, w in 1usize..20) {
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        let grid = rasterize(&screen, h, w);
        let mut acc = [0.0; RASTER_CHANNELS];
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wgt = b.intersection_area(&grid.cell_box(i, j));
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                for (a, v) in acc.iter_mut().zip(grid.cell(i, j)) {
                    *a += wgt * v;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        prop_assert_eq!(roi_pool(&grid, &b).unwrap(), acc);
    }

    #[test]
    fn embed_text_ignores_order_and_duplicates(ids in prop::collection::vec(0usize..50, 1..10), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::uniform(50, 6, 1.0, &mut rng);
        let mut shuffled = ids.clone();
        shuffled.reverse();
        shuffled.push(ids[0]);
        prop_assert_eq!(embed_text(&table, &ids), embed_text(&table, &shuffled));
    }

    #[test]
    fn spatial_phrase_is_antisymmetric(a in bbox(), b in bbox()) {
        let ab = spatial_phrase(&a, &b);
        let ba = spatial_phrase(&b, &a);
        if ab.mode == SpatialMode::Relative && ba.mode == SpatialMode::Relative {
            let flip = |w: &String| match w.as_str() {
                "left" => "right".to_owned(),
                "right" => "left".to_owned(),
                "above" => "below".to_owned(),
                "below" => "above".to_owned(),
                other => other.to_owned(),
            };
            // "right there same spot" marks coincident centers in both directions.
            if ab.words.contains(&"same".to_owned()) {
                prop_assert_eq!(ab.words, ba.words);
            } else {
                prop_assert_eq!(ab.words.iter().map(flip).collect::<Vec<_>>(), ba.words);
            }
        }
    }

    #[test]
    fn followups_name_the_target_within_vocab(seed in any::<u64>()) {
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        let clickable = screen.clickable_indices();
        let g = clickable[seed as usize % clickable.len()];
        let a = clickable[(seed as usize / 3 + 1) % clickable.len()];
        prop_assume!(a != g);
        let c = heuristic_followup(&screen, g, a, 1).unwrap();
        prop_assert_eq!(&c, &heuristic_followup(&screen, g, a, 1).unwrap());
        prop_assert!(c.tokens.len() <= MAX_COMMAND_TOKENS);
        let vocab = Vocab::bundled();
        prop_assert!(c.tokens.iter().all(|t| vocab.contains(t)));
        let d = descriptor(&screen.objects[g]);
        prop_assert!(c.tokens.windows(d.len()).any(|w| w == d.as_slice()));
    }

    #[test]
    fn ins_only_has_no_action_slots(turns in 1usize..=5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cmds: Vec<Vec<usize>> = (0..turns).map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(3..100)).collect()).collect();
        let actions: Vec<usize> = (0..turns - 1).map(|_| rng.gen_range(0..10)).collect();
        let input = build_decoder_input(Variant::InsOnly, &cmds, &actions, None).unwrap();
        prop_assert_eq!(input.num_action_slots(), 0);
        let r = training_returns(turns);
        prop_assert!(r.iter().all(|w| (1..=4).contains(w)) && *r.last().unwrap() == 1);
    }

    #[test]
    fn f1_is_a_cdf(success in prop::collection::vec(prop::option::of(0usize..5), 1..60)) {
        let f: Vec<f64> = (0..MAX_TURNS).map(|t| f1_at(&success, t).unwrap()).collect();
        prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
        for (t, v) in f.iter().enumerate() {
            let brute = success.iter().filter(|s| matches!(s, Some(x) if *x <= t)).count() as f64 / success.len() as f64;
            prop_assert_eq!(*v, brute);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_agents_never_repeat(seed in any::<u64>()) {
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        let clickable = screen.clickable_indices();
        let g = clickable[seed as usize % clickable.len()];
        let s = generate_gold_session(&screen, g, seed, GoldStyle::OneTurn).unwrap();
        let c0 = s.turns[0].command.clone();
        let mut eps = Vec::new();
        for user in [UserKind::Heuristic, UserKind::RandomHeuristic, UserKind::RepeatC0] {
            let opts = OnlineOptions { seed, ..Default::default() };
            let rec = run_online_episode(&RandomAgent { seed }, user, &screen, &s.session_id, g, &c0, &[], &opts).unwrap();
            let acts: BTreeSet<usize> = rec.turns.iter().map(|t| t.action).collect();
            prop_assert_eq!(acts.len(), rec.turns.len());
            prop_assert!(rec.turns.len() <= MAX_TURNS && rec.is_consistent());
            eps.push(rec);
        }
        let gm = gamma(&eps, GammaFilter::ExactlyOnce).unwrap();
        prop_assert_eq!(gm, 0.0);
        let r = SubsetReport::from_episodes(&eps.iter().collect::<Vec<_>>(), GammaFilter::ExactlyOnce);
        prop_assert!(r.is_monotone());
    }

    #[test]
    fn gamma_filters_agree_without_repeated_commands(actions in prop::collection::vec(0usize..4, 1..6)) {
        let turns: Vec<(Vec<String>, usize)> = actions.iter().enumerate().map(|(i, &a)| (vec![format!("c{i}")], a)).collect();
        let dup = actions.iter().collect::<BTreeSet<_>>().len() != actions.len();
        prop_assert_eq!(has_duplicate_action(&turns, GammaFilter::ExactlyOnce), dup);
        prop_assert_eq!(has_duplicate_action(&turns, GammaFilter::FirstOccurrence), dup);
    }

    #[test]
    fn encodings_are_finite(seed in any::<u64>()) {
        let vocab = Vocab::bundled();
        let cfg = ModelConfig { d_model: 16, heads: 2, d_ff: 32, ..ModelConfig::default() };
        let model = Model::new(cfg.clone(), vocab.len(), seed);
        let screen = generate_screen(seed, &GeneratorConfig::default()).unwrap();
        let v = encode_screen(&model, &screen_features(&screen, &vocab, &cfg).unwrap());
        prop_assert!(v.is_finite());
    }
}

#[test]
fn splits_keep_apps_together_and_partition_challenging() {
    for seed in 1..4 {
        let corpus = generate_corpus(&CorpusConfig { seed, num_screens: 300, ..Default::default() }).unwrap();
        let corpus = split_corpus(corpus, [0.8, 0.1, 0.1]).unwrap();
        let mut tags: HashMap<&str, BTreeSet<String>> = HashMap::new();
        for s in &corpus.sessions {
            let app = corpus.screens[&s.screen_id].app_id.as_str();
            tags.entry(app).or_default().insert(s.split_tag.to_string());
        }
        assert!(tags.values().all(|t| t.len() == 1));
        let hard = challenging_subset(&corpus.sessions);
        let rest: Vec<_> = corpus.sessions.iter().filter(|s| !hard.contains(s)).cloned().collect();
        assert_eq!(hard.len() + rest.len(), corpus.sessions.len());
        let ids = |v: &[mug_core::screen::Session]| v.iter().map(|s| s.session_id.clone()).collect::<BTreeSet<_>>();
        assert!(ids(&hard).is_disjoint(&ids(&rest)));
        let mut union = ids(&hard);
        union.extend(ids(&rest));
        assert_eq!(union, ids(&corpus.sessions));
    }
}
