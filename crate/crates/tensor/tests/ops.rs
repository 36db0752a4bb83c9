use voc_tensor::{checkpoint, Graph, ParamStore, Tensor, TensorError};

#[test]
fn cross_entropy_of_uniform_logits_is_ln2() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let l = g.cross_entropy(x, &[Some(0)]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.of(x).unwrap(), &[-0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap());
    let gamma = g.input(Tensor::filled(vec![4], 1.0));
    let beta = g.input(Tensor::zeros(vec![4]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_sum_gradient_is_outer_product_with_ones() {
    let mut store = ParamStore::new();
    let w = store.add(
        "w",
        Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
        true,
    );
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 4.0]).unwrap());
    let wv = g.param(&store, w);
    let y = g.matmul(x, wv).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    // dW[i][j] = x[i]
    assert_eq!(grads.param(w).unwrap(), &[1.0, 1.0, -2.0, -2.0, 4.0, 4.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.scale(x, 3.0);
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::GraphConsumed)));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.backward(x), Err(TensorError::InvalidInput(_))));
}

#[test]
fn matmul_shape_mismatch_reports_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn attention_first_position_copies_its_value() {
    let mut g = Graph::new();
    let q = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
    let k = g.input(Tensor::new(vec![2, 2], vec![0.3, 0.1, 0.2, 0.9]).unwrap());
    let v = g.input(Tensor::new(vec![2, 2], vec![7.0, -1.0, 2.0, 3.0]).unwrap());
    let o = g.causal_attention(q, k, v, 1, 2).unwrap();
    assert_eq!(&g.value(o).data()[..2], &[7.0, -1.0]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut store = ParamStore::new();
    store.add(
        "a",
        Tensor::new(vec![2], vec![1.0 / 3.0, -0.0]).unwrap(),
        true,
    );
    store.add(
        "b",
        Tensor::new(vec![1, 3], vec![f64::MIN_POSITIVE, 2.5, 1e300]).unwrap(),
        false,
    );
    let hyper = serde_json::json!({"width": 8});
    let bytes = checkpoint::to_bytes(&store, hyper.clone()).unwrap();
    let (back, h) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(h, hyper);
    assert_eq!(checkpoint::to_bytes(&back, h).unwrap(), bytes);
    assert_eq!(back.param(back.find("b").unwrap()).decay, false);
}
