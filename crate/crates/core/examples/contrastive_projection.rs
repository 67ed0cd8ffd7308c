//! Builds every contrastive attribute for one sentence representation and
//! checks the projection properties numerically.
//!
//! ```sh
//! cargo run --example contrastive_projection
//! ```

use ccprompt::contrastive::{
    build_subspace, construct_all_attributes, project, InstanceRepresentation, Verbalizer,
};
use ndarray::Array1;
use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

fn main() -> ccprompt::Result<()> {
    let mut rng = Pcg64::seed_from_u64(7);
    let labels: Vec<String> = ["founded_by", "member_of", "born_in", "no_relation"]
        .map(String::from)
        .to_vec();
    let verbalizer = Verbalizer::random(labels.clone(), 5, 1.0, &mut rng)?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let h = Array1::from_shape_fn(5, |_| normal.sample(&mut rng));
    let rep = InstanceRepresentation::new(h.clone(), 9)?;

    let attrs = construct_all_attributes(&verbalizer, &rep)?;
    println!("attribute tensor: {:?}", attrs.values().dim());
    for (i, j) in attrs.pair_index().pairs() {
        let c = attrs.attribute(i, j);
        println!(
            "  c[{:>11} vs {:<11}] |c| = {:.4}",
            labels[i],
            labels[j],
            c.dot(&c).sqrt()
        );
    }

    let s = build_subspace(&verbalizer, 0, 2)?;
    let c = project(h.view(), &s)?;
    let twice = project(c.view(), &s)?;
    let reversed = project(h.view(), &build_subspace(&verbalizer, 2, 0)?)?;
    println!(
        "idempotence error:  {:.2e}",
        (&twice - &c).mapv(f64::abs).sum()
    );
    println!(
        "symmetry error:     {:.2e}",
        (&reversed - &c).mapv(f64::abs).sum()
    );
    println!("|c| <= |h|:         {}", c.dot(&c) <= h.dot(&h));
    Ok(())
}
