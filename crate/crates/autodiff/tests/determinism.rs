//! Training trajectories must be bit-identical at any worker count.

use std::collections::BTreeMap;

use mapspell_autodiff::{init, Adam, Graph, ParamStore, Tensor};

/// A few Adam steps on a two-layer net large enough to trip the parallel
/// matmul path.
fn run_training(threads: usize) -> Vec<u64> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let mut rng = init::seeded_rng(42);
        let mut store = ParamStore::new();
        store.insert("w1", init::xavier(64, 96, &mut rng));
        store.insert("b1", Tensor::zeros(&[96]));
        store.insert("w2", init::xavier(96, 4, &mut rng));
        let x = init::uniform(&[128, 64], 1.0, &mut rng);
        let targets: Vec<usize> = (0..128).map(|i| i % 4).collect();
        let mut adam = Adam::new(1e-3);
        for _ in 0..10 {
            let mut g = Graph::new();
            let xc = g.constant(x.clone());
            let w1 = g.param("w1", store.get("w1").unwrap().clone());
            let b1 = g.param("b1", store.get("b1").unwrap().clone());
            let w2 = g.param("w2", store.get("w2").unwrap().clone());
            let h = g.matmul(xc, w1, false).unwrap();
            let h = g.add(h, b1).unwrap();
            let h = g.gelu(h);
            let logits = g.matmul(h, w2, false).unwrap();
            let loss = g.cross_entropy(logits, &targets, None).unwrap();
            g.backward(loss).unwrap();
            adam.step(&mut store, &g.param_grads()).unwrap();
        }
        let mut bits = Vec::new();
        for (_, t) in store.iter() {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        }
        bits
    })
}

#[test]
fn trajectory_bitwise_identical_across_thread_counts() {
    let one = run_training(1);
    let four = run_training(4);
    assert_eq!(one, four);
}

#[test]
fn grads_are_pure_function_of_graph() {
    let build = |store: &ParamStore| -> BTreeMap<String, Tensor> {
        let mut g = Graph::new();
        let w = g.param("w", store.get("w").unwrap().clone());
        let x = g.constant(init::uniform(&[8, 8], 1.0, &mut init::seeded_rng(3)));
        let y = g.matmul(x, w, false).unwrap();
        let sm = g.softmax(y).unwrap();
        let loss = g.cross_entropy(sm, &[0, 1, 2, 3, 4, 5, 6, 7], None).unwrap();
        g.backward(loss).unwrap();
        g.param_grads()
    };
    let mut store = ParamStore::new();
    store.insert("w", init::uniform(&[8, 8], 0.5, &mut init::seeded_rng(1)));
    let a = build(&store);
    let b = build(&store);
    assert_eq!(a["w"].data(), b["w"].data());
}
