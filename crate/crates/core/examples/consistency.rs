//! Cluster-to-class mapping, macro-F1 and cluster consistency on fixed
//! predictions, including an expert judgment file.

use foc::evaluator::{
    accuracy, cluster_mapping, consistency_from_experts, consistency_score, macro_f1, proxy_judgments,
    read_expert_judgments, write_expert_judgments, ExpertJudgment,
};

fn main() -> foc::Result<()> {
    let truths = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
    // Six clusters for three classes; cluster 4 mixes classes 1 and 2.
    let clusters = [0, 0, 1, 2, 4, 4, 4, 5, 5, 3];
    let mapping = cluster_mapping(&clusters, &truths, 6, 3, "demo")?;
    println!("cluster -> class: {:?}", mapping.assignment);
    let mapped = mapping.apply(&clusters);
    println!("accuracy {:.3}, macro-F1 {:.3}", accuracy(&mapped, &truths)?, macro_f1(&mapped, &truths, 3)?);

    let judgments = proxy_judgments(&clusters, &truths, &mapping);
    let report = consistency_score(&clusters, &judgments)?;
    println!("proxy consistency {:.3} (per-cluster mean {:.3}, std {:.3})", report.overall, report.mean, report.std);

    // An expert may disagree with the proxy; edits go through the CSV file.
    let mut rows: Vec<ExpertJudgment> = clusters
        .iter()
        .zip(&judgments)
        .enumerate()
        .map(|(i, (&cluster, &consistent))| ExpertJudgment {
            path: format!("img_{i}.png"),
            cluster,
            consistent,
        })
        .collect();
    rows[4].consistent = false;
    let dir = std::env::temp_dir().join("foc-consistency-demo");
    std::fs::create_dir_all(&dir).expect("output directory");
    let path = dir.join("judgments.csv");
    write_expert_judgments(&path, &rows)?;
    let expert = consistency_from_experts(&read_expert_judgments(&path)?)?;
    println!("expert consistency {:.3}", expert.overall);
    for c in &expert.per_cluster {
        println!("  cluster {}: {}/{}", c.cluster, c.consistent, c.size);
    }
    Ok(())
}
