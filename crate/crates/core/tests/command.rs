use echomaze_core::command::*;
use echomaze_core::rng;
use proptest::prelude::*;
use rand::Rng;

const CORPUS: &str = include_str!("../data/scripts/corpus.txt");

fn arb_leaf() -> impl Strategy<Value = CommandAst> {
    prop_oneof![
        (1..=MAX_MOVE_CELLS).prop_map(|cells| CommandAst::Move { cells }),
        prop_oneof![Just(TurnDir::Left), Just(TurnDir::Right), Just(TurnDir::Around)]
            .prop_map(|dir| CommandAst::Turn { dir }),
        Just(CommandAst::QueryPosition),
        Just(CommandAst::QuerySurroundings),
        prop_oneof![
            Just(Answer::Yes),
            Just(Answer::No),
            Just(Answer::Left),
            Just(Answer::Right),
            Just(Answer::Forward)
        ]
        .prop_map(|answer| CommandAst::Answer { answer }),
        Just(CommandAst::Go),
        Just(CommandAst::Stop),
    ]
}

fn arb_program() -> impl Strategy<Value = Vec<CommandAst>> {
    let stmt = arb_leaf().prop_recursive(MAX_DEPTH as u32, 64, 4, |inner| {
        (1..=MAX_REPEAT, prop::collection::vec(inner, 1..4))
            .prop_map(|(count, body)| CommandAst::Repeat { count, body })
    });
    prop::collection::vec(stmt, 1..5).prop_filter("go then forward has no text form", |p| !has_go_forward(p))
}

fn has_go_forward(program: &[CommandAst]) -> bool {
    program.windows(2).any(|w| {
        w[0] == CommandAst::Go
            && w[1]
                == CommandAst::Answer {
                    answer: Answer::Forward,
                }
    }) || program.iter().any(|s| match s {
        CommandAst::Repeat { body, .. } => has_go_forward(body),
        _ => false,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn render_then_parse_is_identity(program in arb_program()) {
        let text = render(&program);
        prop_assert_eq!(parse_text(&text), Ok(program), "{}", text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]
    #[test]
    fn normalize_is_idempotent(text in "[a-zA-Z0-9 .,!?;:()\u{2026}]{0,40}") {
        if let Ok(tokens) = normalize(&text) {
            prop_assert_eq!(normalize(&tokens.join(" ")), Ok(tokens));
        }
    }

    #[test]
    fn parsing_is_deterministic(text in "[a-z0-9 ()]{0,30}") {
        prop_assert_eq!(parse_text(&text), parse_text(&text));
    }
}

#[test]
fn arbitrary_bytes_never_abort() {
    let vocab = [
        "move", "go", "forward", "turn", "left", "right", "around", "repeat", "times", "(", ")", "where", "am", "i",
        "what", "is", "me", "yes", "no", "stop", "3", "0", "100", "x",
    ];
    let mut r = rng::seeded(99);
    for k in 0..100_000 {
        let text = if k % 2 == 0 {
            let len = r.random_range(0..48);
            let bytes: Vec<u8> = (0..len).map(|_| r.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let len = r.random_range(0..24);
            (0..len).map(|_| vocab[r.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
        };
        match parse_text(&text) {
            Ok(program) => assert!(!program.is_empty()),
            Err(CommandError::Parse(e)) => {
                let n = normalize(&text).unwrap().len();
                assert!(e.index <= n, "{text:?}: {e}");
            }
            Err(CommandError::EmptyUtterance | CommandError::LimitExceeded { .. }) => {}
            Err(other) => panic!("{text:?}: unexpected {other:?}"),
        }
    }
}

#[test]
fn deep_nesting_is_refused_without_overflow() {
    let text = format!("{}go{}", "repeat 1 (".repeat(10_000), ")".repeat(10_000));
    assert!(matches!(parse_text(&text), Err(CommandError::LimitExceeded { .. })));
}

#[test]
fn bundled_corpus_is_half_recognised() {
    let lines = parse_script(CORPUS).unwrap();
    assert_eq!(lines.len(), 40);
    assert_eq!(lines.iter().filter(|l| l.expect_error).count(), 20);
    let outcomes = evaluate_script(&lines);
    for (line, (text, parsed)) in lines.iter().zip(&outcomes) {
        assert_eq!(*parsed, !line.expect_error, "line {}: {text}", line.line);
    }
    assert_eq!(recognition_rate(&outcomes).unwrap(), 0.5);
}
