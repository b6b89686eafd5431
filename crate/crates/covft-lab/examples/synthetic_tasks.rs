//! A tour of the task generator: one sample of each of the 15 kinds over its
//! own scene, then the subsampling property — the 25% dataset is literally a
//! prefix of the 100% one.

use covft_lab::seed::stream;
use covft_lab::taskgen::{build_dataset, make_sample, ALL_KINDS, VOCAB};
use covft_lab::Result;

fn words(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| VOCAB[t]).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<()> {
    let mut rng = stream(3, "tour");
    for kind in ALL_KINDS {
        let s = make_sample(kind, &mut rng)?;
        let objects: Vec<String> = s
            .scene
            .objects
            .iter()
            .map(|o| format!("{} {} @({},{})", VOCAB[o.color.token()], VOCAB[o.shape.token()], o.row, o.col))
            .collect();
        println!("{:>18}  scene: {}", kind.name(), objects.join(", "));
        println!("{:>18}  Q: {:<28} A: {}", "", words(&s.instruction), words(&s.answer));
    }

    let full = build_dataset(40, 11, 1.0, &ALL_KINDS)?;
    let quarter = build_dataset(40, 11, 0.25, &ALL_KINDS)?;
    assert_eq!(&full[..quarter.len()], &quarter[..]);
    println!(
        "\nfraction 0.25 gives the first {} of {} samples — scaling sweeps share every sample they can",
        quarter.len(),
        full.len()
    );
    Ok(())
}
