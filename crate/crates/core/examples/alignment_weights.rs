//! Position-aware weighting of the activation loss on a hand-sized batch:
//! two records land in the slot-2 bin, one in the slot-3 bin.
//!
//! cargo run --release --example alignment_weights

use posbias::distill::{alignment_weights, combine_activation, make_bins, BinMember};
use posbias::prob::{kl_divergence, ProbVector};

fn member(id: u64, loss: f64) -> BinMember {
    BinMember {
        record: id as usize,
        instance_id: id,
        trivial_index: 0,
        loss,
    }
}

fn main() -> posbias::Result<()> {
    let bins = make_bins([(2, member(0, 1.0)), (2, member(1, 3.0)), (3, member(2, 2.0))]);
    let w = alignment_weights(&bins)?;
    for (i, bin) in bins.iter().enumerate() {
        let alphas: Vec<f64> = (0..bin.members.len()).map(|j| w.alpha(i, j)).collect();
        println!(
            "slot {}: mean loss {:.3}, inter {:.5}, intra {:?}, alpha {:?}",
            bin.position, bin.mean_loss(), w.inter[i], w.intra[i], alphas
        );
    }
    println!("weighted L_Act {:.5}", combine_activation(&bins, true)?);
    println!("unweighted L_Act {:.5}", combine_activation(&bins, false)?);

    let p = ProbVector::new(vec![0.5, 0.5])?;
    let q = ProbVector::new(vec![0.25, 0.75])?;
    println!("KL([.5 .5] || [.25 .75]) = {:.5} nats", kl_divergence(&p, &q)?);
    Ok(())
}
