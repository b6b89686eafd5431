//! The tape on its own: a two-layer GELU classifier built op by op, one
//! backward sweep, and a finite-difference audit of every coordinate.

use covft_lab::autodiff::{finite_diff_check, Var};
use covft_lab::params::{normal, ParamStore, Tape};
use covft_lab::seed::stream;
use covft_lab::tensor::l2_norm;
use covft_lab::{Result, Tensor};

/// `cross_entropy(gelu(x·w1 + b1)·w2, targets)` over a fixed 2-row batch.
fn forward(t: &mut Tape) -> Result<Var> {
    let x = t.constant(Tensor::matrix(
        2,
        4,
        vec![0.5, -1.0, 0.25, 2.0, -0.75, 1.5, 0.0, -0.5],
    )?);
    let (w1, b1, w2) = (t.param("w1")?, t.param("b1")?, t.param("w2")?);
    let h = t.graph.matmul(x, w1)?;
    let h = t.graph.add_row(h, b1)?;
    let h = t.graph.gelu(h)?;
    let logits = t.graph.matmul(h, w2)?;
    t.graph.cross_entropy(logits, &[Some(1), Some(2)])
}

fn main() -> Result<()> {
    let mut store = ParamStore::new();
    let mut rng = stream(7, "autodiff-basics");
    store.insert("w1", normal(&mut rng, vec![4, 8], 0.5))?;
    store.insert("b1", normal(&mut rng, vec![8], 0.1))?;
    store.insert("w2", normal(&mut rng, vec![8, 3], 0.5))?;

    let mut tape = Tape::new(&store);
    let loss = forward(&mut tape)?;
    println!("loss = {:.6}", tape.graph.scalar_value(loss)?);

    let grads = tape.graph.backward(loss)?;
    let by_name = tape.grads_by_name(&grads);
    for (name, g) in &by_name {
        println!("  d loss / d {name}: norm {:.6}", l2_norm(g));
    }
    let names: Vec<String> = by_name.keys().cloned().collect();
    drop(tape);

    // Probe all coordinates; the floor in the relative error absorbs
    // finite-difference noise on near-zero entries.
    let report = finite_diff_check(
        &mut store,
        &names,
        &by_name,
        |s| {
            let mut t = Tape::new(s);
            let l = forward(&mut t)?;
            t.graph.scalar_value(l)
        },
        1e-5,
        0,
        7,
    )?;
    println!(
        "finite differences: {} coordinates checked, max rel err {:.2e} (worst {})",
        report.checked, report.max_rel_err, report.worst
    );
    Ok(())
}
