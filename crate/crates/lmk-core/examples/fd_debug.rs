use lmk_core::autodiff::*;

fn main() {
    let params = vec![ParamTensor::new("p", vec![3], vec![0.3, -1.2, 2.0])];
    // analytic
    let mut g = Graph::with_seed(Mode::Eval, 0);
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.shape.clone(), p.values.clone())).collect();
    let sq = g.sum_squares(ids[0]);
    let loss = g.scale(sq, 0.5);
    println!("loss = {}", g.scalar(loss));
    g.backward(loss).unwrap();
    println!("grad = {:?}", g.grad(ids[0]));

    let report = finite_diff_check(&params, GradCheckSettings { eps: 1e-6, ..Default::default() }, Mode::Eval, |g, ids| {
        let sq = g.sum_squares(ids[0]);
        Ok(g.scale(sq, 0.5))
    }).unwrap();
    println!("max_rel_err={} worst={}[{}] a={} n={}", report.max_rel_err, report.worst_param, report.worst_coord, report.analytic, report.numeric);
}
