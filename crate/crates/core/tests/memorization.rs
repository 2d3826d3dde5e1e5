//! Single-edit overfit oracle: a short pretrain, then one counterfactual edit of 50
//! optimizer steps at lr 1e-3.

use evoedit_core::corpus::{pretraining_texts, EditInstance, Rank, RankedQuery};
use evoedit_core::engine::{edit_tokens, pretrain, EditConfig, EditState, Method, PretrainConfig};
use evoedit_core::eval::{bleu, Answerer, LmAnswerer};
use evoedit_core::model::{ModelConfig, ModelParams};
use evoedit_core::tokenizer::Tokenizer;

fn capital_edit() -> EditInstance {
    let q = |rank, question: &str, answer: &str| RankedQuery {
        rank,
        question: question.into(),
        answer: answer.into(),
    };
    EditInstance {
        id: "capital-0".into(),
        edit_text: "The capital of Veldoria is Quorath. Travellers to Veldoria arrive in Quorath by river.".into(),
        queries: vec![
            q(Rank::R1Memory, "The capital of Veldoria is ____.", "Quorath"),
            q(Rank::R2Comprehension, "Which city is the capital of Veldoria?", "Quorath"),
            q(Rank::R3Constrained, "Travellers to Veldoria arrive in ____ by river.", "Quorath"),
            q(Rank::R4Reasoning, "Where would the government of Veldoria sit?", "Quorath"),
        ],
        metadata: None,
    }
}

fn setup() -> (Tokenizer, ModelParams) {
    let mut texts = pretraining_texts();
    let inst = capital_edit();
    texts.push(inst.edit_text.clone());
    let tokenizer = Tokenizer::train_bpe(&texts, 512).unwrap();
    let cfg = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg).unwrap();
    let docs: Vec<_> = pretraining_texts()
        .iter()
        .map(|t| edit_tokens(&tokenizer, t, cfg.max_seq_len).unwrap().0)
        .collect();
    let pcfg = PretrainConfig {
        steps: 300,
        ..PretrainConfig::default()
    };
    pretrain(&mut params, &docs, &pcfg, |_, _| {}).unwrap();
    (tokenizer, params)
}

#[test]
fn one_edit_is_memorized() {
    let (tokenizer, base) = setup();
    let inst = capital_edit();
    inst.validate().unwrap();
    let tokens = edit_tokens(&tokenizer, &inst.edit_text, base.config.max_seq_len).unwrap().0;
    let config = EditConfig {
        epochs_per_edit: 50,
        lr: 1e-3,
        ..EditConfig::default()
    };
    for method in [Method::EvoEdit, Method::Ft] {
        let mut state = EditState::new(base.clone(), method.configure(&config)).unwrap();
        let log = state.apply_edit(&tokens).unwrap();
        assert_eq!(log.losses.len(), 50);
        let lm = LmAnswerer {
            params: state.current(),
            tokenizer: &tokenizer,
            max_new: 16,
        };
        let r1 = inst.queries_of(Rank::R1Memory).next().unwrap();
        let answer = lm.answer(r1).unwrap();
        let ppl = lm.answer_perplexity(r1).unwrap().unwrap();
        assert!(answer.contains("Quorath"), "{method}: completion {answer:?}");
        assert!(ppl < 1.5, "{method}: ppl {ppl}");
        assert!(bleu(&answer, &r1.answer) > 0.99);

        let before = LmAnswerer {
            params: &base,
            tokenizer: &tokenizer,
            max_new: 16,
        };
        assert!(!before.answer(r1).unwrap().contains("Quorath"));
    }
}
