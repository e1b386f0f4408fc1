use listrank::consistency::Permutation;
use listrank::ranking::{Rating, TargetRanking};
use listrank::template::*;
use proptest::prelude::*;

fn golden(name: &str) -> String {
    let path = format!("{}/goldens/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn item(id: u64, title: &str, genres: &[&str]) -> Item {
    Item::new(id, title, genres.iter().map(|g| g.to_string()).collect()).unwrap()
}

fn rating(r: i64) -> Rating {
    Rating::new(r).unwrap()
}

fn movie_prompt() -> (HistorySequence, CandidateSlate) {
    let history = HistorySequence::new(vec![
        (item(780, "Independence Day", &["Action", "SciFi", "War"]), rating(3)),
        (item(1097, "Close Encounters of the Third Kind (1977)", &["Drama", "Sci-Fi"]), rating(4)),
    ]);
    let slate = CandidateSlate::new(
        vec![
            item(2105, "Starman", &["Adventure", "Drama", "Romance"]),
            item(2, "Jumanji (1995)", &["Adventure", "Children's", "Fantasy"]),
            item(1, "Toy Story (1995)", &["Animation", "Children's", "Comedy"]),
        ],
        Some(vec![rating(4), rating(5), rating(2)]),
    )
    .unwrap();
    (history, slate)
}

#[test]
fn movie_prompt_matches_golden_bytes() {
    let (history, slate) = movie_prompt();
    let source = render_source(&history, &slate, &PromptStyle::default()).unwrap();
    assert_eq!(source, golden("movie_source.txt"));
    let target = target_ranking(&slate, TieBreak::Title).unwrap();
    assert_eq!(render_target(&target), golden("movie_target.txt"));
}

#[test]
fn swapping_first_two_candidates_relabels_target() {
    let (_, slate) = movie_prompt();
    let swapped = apply_permutation(&Permutation::swap(3, 0, 1), &slate).unwrap();
    let target = target_ranking(&swapped, TieBreak::Title).unwrap();
    assert_eq!(render_target(&target), golden("movie_swapped_target.txt"));
}

#[test]
fn equal_ratings_sort_alphabetically_ignoring_case() {
    let slate = CandidateSlate::new(
        vec![item(1, "Zodiac", &[]), item(2, "alien", &[]), item(3, "Brazil", &[])],
        Some(vec![rating(4), rating(4), rating(5)]),
    )
    .unwrap();
    let target = target_ranking(&slate, TieBreak::Title).unwrap();
    assert_eq!(render_target(&target), golden("tie_break_target.txt"));
    // label order keeps input order among ties
    assert_eq!(render_target(&target_ranking(&slate, TieBreak::Label).unwrap()), "C A B");
}

#[test]
fn prompt_record_carries_permuted_target() {
    let (history, slate) = movie_prompt();
    let p = Permutation::swap(3, 0, 1);
    let rec = PromptRecord::build(&history, &slate, TieBreak::Title, &PromptStyle::default(), Some(p)).unwrap();
    assert_eq!(rec.target_text, "A B C");
    assert!(rec.source_text.contains("(A) title: Jumanji (1995)"));
}

fn arb_title() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z ()']{0,12}".prop_map(|s| s.trim_end().to_string()).prop_filter("non-empty", |s| !s.is_empty())
}

fn arb_slate(max: usize) -> impl Strategy<Value = CandidateSlate> {
    prop::collection::vec((arb_title(), prop::collection::vec("[A-Z][a-z]{1,6}", 0..3), 1i64..=5), 1..=max).prop_map(|rows| {
        let items = rows.iter().enumerate().map(|(i, (t, g, _))| Item::new(i as u64, t.clone(), g.clone()).unwrap()).collect();
        let ratings = rows.iter().map(|r| Rating::new(r.2).unwrap()).collect();
        CandidateSlate::new(items, Some(ratings)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_render(order in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(), m in 1usize..=10) {
        let order: Vec<usize> = order.into_iter().filter(|&i| i < m).collect();
        let tau = TargetRanking::new(order).unwrap();
        let text = render_target(&tau);
        prop_assert_eq!(parse_ranking(&text, m, ParseMode::Strict).unwrap(), tau.clone());
        prop_assert_eq!(parse_ranking(&text, m, ParseMode::Repair).unwrap(), tau);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn distinct_slates_render_distinct_sources(a in arb_slate(6), b in arb_slate(6)) {
        let history = HistorySequence::new(vec![]);
        let style = PromptStyle::default();
        let same = a.items.len() == b.items.len()
            && a.items.iter().zip(&b.items).all(|(x, y)| x.title == y.title && x.attributes == y.attributes);
        let ra = render_source(&history, &a.without_ratings(), &style).unwrap();
        let rb = render_source(&history, &b.without_ratings(), &style).unwrap();
        prop_assert_eq!(same, ra == rb);
    }

    #[test]
    fn targets_are_always_permutations(slate in arb_slate(10)) {
        let t = target_ranking(&slate, TieBreak::Title).unwrap();
        let mut sorted = t.order().to_vec();
        sorted.sort();
        prop_assert_eq!(sorted, (0..slate.len()).collect::<Vec<_>>());
        let r = slate.ratings().unwrap();
        for w in t.order().windows(2) {
            prop_assert!(r[w[0]] >= r[w[1]]);
        }
    }
}
