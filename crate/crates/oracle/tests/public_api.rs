use aesp_oracle::{
    brute_force_vote, gradient_check, reference_forward, softmax, Matrix, RefLayer, RefLayout, RefWeights,
};

fn identity_layer(d: usize) -> RefLayer {
    let eye: Matrix = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    RefLayer {
        ln1_gamma: vec![1.0; d],
        ln1_beta: vec![0.0; d],
        wq: eye.clone(),
        bq: vec![0.0; d],
        wk: eye.clone(),
        bk: vec![0.0; d],
        wv: eye.clone(),
        bv: vec![0.0; d],
        wo: eye.clone(),
        bo: vec![0.0; d],
        ln2_gamma: vec![1.0; d],
        ln2_beta: vec![0.0; d],
        w1: eye.clone(),
        b1: vec![0.0; d],
        w2: eye,
        b2: vec![0.0; d],
    }
}

fn weights(d: usize, layers: usize) -> RefWeights {
    RefWeights {
        layers: vec![identity_layer(d); layers],
        final_gamma: vec![1.0; d],
        final_beta: vec![0.0; d],
        num_heads: 2,
        eps: 1e-6,
    }
}

fn sequence(visual: f64) -> Matrix {
    vec![
        vec![0.1, 0.4, -0.2, 0.3],
        vec![1.0, -0.5, 0.2, 0.0],
        vec![-0.3, 0.8, 0.1, 0.5],
        vec![0.6, 0.2, -0.9, 0.4],
        vec![visual, -visual, 0.5 * visual, 0.2],
    ]
}

// Image rows still see the class token, which sees the prompts, so the
// isolation only holds within one block.
#[test]
fn isolated_image_rows_ignore_prompts_within_a_block() {
    let layout = RefLayout {
        image_tokens: 2,
        visual_tokens: 1,
        isolate_image: true,
    };
    let a = reference_forward(&sequence(1.0), &weights(4, 1), &[], layout).unwrap();
    let b = reference_forward(&sequence(-3.0), &weights(4, 1), &[], layout).unwrap();
    assert_eq!(a[1..3], b[1..3]);
    assert_ne!(a[0], b[0]);
}

#[test]
fn full_attention_lets_prompts_reach_image_rows() {
    let layout = RefLayout {
        image_tokens: 2,
        visual_tokens: 1,
        isolate_image: false,
    };
    let a = reference_forward(&sequence(1.0), &weights(4, 1), &[], layout).unwrap();
    let b = reference_forward(&sequence(-3.0), &weights(4, 1), &[], layout).unwrap();
    assert_ne!(a[1], b[1]);
}

#[test]
fn gradient_check_accepts_softmax_cross_entropy() {
    let x = [0.3, -1.2, 0.7];
    let p = softmax(&x);
    let analytic: Vec<f64> = p.iter().enumerate().map(|(i, &v)| v - f64::from(u8::from(i == 2))).collect();
    let r = gradient_check("ce", &analytic, |z| -softmax(z)[2].ln(), &x, 1e-5, 1e-8);
    assert!(r.pass, "{r}");
}

#[test]
fn vote_always_picks_a_candidate() {
    for p1 in 1..=5 {
        for p2 in 1..=5 {
            for p3 in 1..=5 {
                assert!([p1, p2, p3].contains(&brute_force_vote(p1, p2, p3)));
            }
        }
    }
}
