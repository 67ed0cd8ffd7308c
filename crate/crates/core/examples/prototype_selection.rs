//! Scores contrastive attributes against a prototype bank, keeps the top
//! `m`, and evaluates the prototype loss under both denominators.
//!
//! ```sh
//! cargo run --example prototype_selection
//! ```

use ccprompt::contrastive::{construct_all_attributes, InstanceRepresentation, Verbalizer};
use ccprompt::prototype::{
    contrastive_loss_with, select_top_m, slot_scores, Denominator, PrototypeBank,
};
use ndarray::Array1;
use rand_core::SeedableRng;
use rand_pcg::Pcg64;

fn main() -> ccprompt::Result<()> {
    let mut rng = Pcg64::seed_from_u64(3);
    let labels: Vec<String> = (0..4).map(|c| format!("class_{c}")).collect();
    let verbalizer = Verbalizer::random(labels.clone(), 6, 1.0, &mut rng)?;
    let h = Array1::linspace(-1.0, 1.5, 6);
    let attrs = construct_all_attributes(&verbalizer, &InstanceRepresentation::new(h, 6)?)?;

    let bank = PrototypeBank::from_verbalizer(&verbalizer, ndarray::Array2::eye(6))?;
    let scores = slot_scores(&attrs, &bank)?;
    for ((i, j), s) in attrs.pair_index().pairs().zip(&scores) {
        println!("slot ({i}, {j}) score {s:+.4}");
    }

    let selection = select_top_m(&attrs, &bank, 3)?;
    println!("\ntop 3:");
    for s in &selection.selected {
        println!(
            "  {} vs {}  {:+.4}",
            labels[s.fact], labels[s.counterfact], s.score
        );
    }

    let random = PrototypeBank::random(4, 6, &mut rng)?;
    for gold in 0..4 {
        let neg = contrastive_loss_with(&attrs, &random, gold, Denominator::NegativesOnly)?;
        let pos = contrastive_loss_with(&attrs, &random, gold, Denominator::WithPositive)?;
        println!("gold {gold}: L_con negatives-only {neg:.4}, with positive {pos:.4}");
    }
    Ok(())
}
