//! The three loss terms on hand-made probability vectors.

use foc::losses::{ce_inverse, ce_inverse_loss, cross_entropy, joint_matrix, mutual_information, total_loss};

fn main() -> foc::Result<()> {
    println!("cross-entropy");
    println!("  [0.5, 0.5] vs one-hot [1, 0]:   {:.4}", cross_entropy(&[0.5, 0.5], &[1.0, 0.0])?);
    println!("  [0.25, 0.75] vs [0.5, 0.5]:     {:.4}", cross_entropy(&[0.25, 0.75], &[0.5, 0.5])?);

    // Mass of p on classes where q is empty costs nothing, so a sample split
    // between two clusters is not pushed toward either by an inverse example
    // from a third one.
    println!("inverse cross-entropy");
    println!("  p=[0.5,0.5,0] q=[0,0,1]:        {:.4}", ce_inverse(&[0.5, 0.5, 0.0], &[0.0, 0.0, 1.0])?);
    println!("  p=[1,0] q=[1,0]:                {:.4}", ce_inverse(&[1.0, 0.0], &[1.0, 0.0])?);
    println!(
        "  two views against an inverse:   {:.4}",
        ce_inverse_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0])?
    );

    println!("mutual information between paired views");
    let one_hot = |c: usize| {
        let mut v = vec![0.0; 4];
        v[c] = 1.0;
        v
    };
    let a: Vec<Vec<f64>> = (0..4).map(one_hot).collect();
    let agreeing = joint_matrix(&a, &a)?;
    println!("  four agreeing pairs:            {:.4} (ln 4 = {:.4})", mutual_information(&agreeing), 4f64.ln());
    let uniform = vec![vec![0.25; 4]; 4];
    println!("  uniform predictions:            {:.4}", mutual_information(&joint_matrix(&uniform, &uniform)?));

    let mi = mutual_information(&agreeing);
    println!("total with lambda_s = lambda_u = 1, L_s = 0.7: {:.4}", total_loss(0.7, mi, 1.0, 1.0));
    Ok(())
}
