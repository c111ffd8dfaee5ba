use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(op(inputs) * r)` for a fixed random `r`, then compares the
/// reverse sweep against central differences on every input coordinate.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = eval(&inputs);
    let r = rand_tensor(&mut rng, tape.value(out).dims(), -1.0, 1.0);
    let objective = |inputs: &[Tensor<f64>]| {
        let (mut tape, vars, out) = eval(inputs);
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let m = tape.mean(prod);
        (tape, vars, m)
    };
    let (tape, vars, root) = objective(&inputs);
    let grads = tape.backward(root);
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii]);
        let mut num = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[ii].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[ii].data_mut()[j] -= h;
            let (tp, _, rp) = objective(&plus);
            let (tm, _, rm) = objective(&minus);
            num[j] = (tp.value(rp).data()[0] - tm.value(rm).data()[0]) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .data()
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(num.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        assert!(
            diff / scale < 1e-4,
            "input {ii}: relative error {} (analytic {:?} numeric {:?})",
            diff / scale,
            &analytic.data()[..4.min(num.len())],
            &num[..4.min(num.len())]
        );
    }
}

#[test]
fn grad_conv1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    check(vec![x, w, b], |t, v| t.conv1x1(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn grad_conv3x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    check(vec![x, w, b], |t, v| t.conv3x3(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn grad_dwconv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 5, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
    check(vec![x, w], |t, v| t.dwconv3x3(v[0], v[1]).unwrap());
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    check(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn grad_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let v = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let temp = rand_tensor(&mut rng, &[2], 0.5, 2.0);
    check(vec![q, k, v, temp], |t, v| {
        t.channel_attention(v[0], v[1], v[2], v[3], 2).unwrap()
    });
}

#[test]
fn grad_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3, 3], 0.2, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 3], 0.2, 1.0);
    let m = rand_tensor(&mut rng, &[1, 3, 3], -1.0, 1.0);
    check(vec![a, b, m], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let p = t.mul(d, v[1]).unwrap();
        let q = t.div(p, v[0]).unwrap();
        let g = t.gelu(q);
        let sg = t.sigmoid(g);
        let sq = t.square(sg);
        let rt = t.sqrt(sq);
        let mm = t.mul_map(rt, v[2]).unwrap();
        let sc = t.scale(mm, 1.7);
        let ab = t.add_scalar(sc, 3.0);
        t.abs(ab)
    });
}

#[test]
fn grad_structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[4, 4, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
    check(vec![a, b], |t, v| {
        let c = t.concat(&[v[0], v[1]]).unwrap();
        let s = t.slice_channels(c, 1, 4).unwrap();
        let u = t.pixel_unshuffle(s, 2).unwrap();
        let p = t.pixel_shuffle(u, 2).unwrap();
        let r = t.resize_bilinear(p, 7, 6).unwrap();
        let sob = t.sobel(r).unwrap();
        t.filter_valid(sob, &[0.25, 0.5, 0.25]).unwrap()
    });
}

#[test]
fn grad_prompt_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let bank = rand_tensor(&mut rng, &[5, 2, 3, 3], -1.0, 1.0);
    check(vec![x, w, b, bank], |t, v| {
        let gap = t.spatial_mean(v[0]).unwrap();
        let l = t.linear(gap, v[1], v[2]).unwrap();
        let s = t.softmax(l);
        let m = t.mix(s, v[3]).unwrap();
        t.channel_mix(m, &[vec![0.3, -0.2], vec![1.0, 0.5], vec![0.1, 0.1]], &[0.5, 0.0, 0.1])
            .unwrap()
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full(&[1, 2, 2], 2.0));
    let b = tape.leaf(Tensor::full(&[1, 2, 2], 3.0));
    let p = tape.mul(a, b).unwrap();
    let m = tape.mean(p);
    let g = tape.backward(m);
    assert!(g.get(a).is_none());
    assert_eq!(g.get(b).unwrap().data(), &[0.5; 4]);
}

#[test]
fn shape_errors() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 4, 4]));
    let b = tape.leaf(Tensor::zeros(&[3, 4, 4]));
    assert!(tape.add(a, b).is_err());
    let w = tape.leaf(Tensor::zeros(&[4, 3]));
    assert!(tape.conv1x1(a, w, None).is_err());
    let temp = tape.leaf(Tensor::zeros(&[3]));
    assert!(tape.channel_attention(a, a, a, temp, 3).is_err());
}
