//! Reads CoNLL-U, compares two analyses and writes the trees back out.

use depformer::data::{emit_conllu, parse_conllu};
use depformer::treedec::attachment_counts;

const GOLD: &str = "# text = the dog barked loudly
1\tthe\tthe\tDET\t_\t_\t2\tdet\t_\t_
2\tdog\tdog\tNOUN\t_\t_\t3\tnsubj\t_\t_
3\tbarked\tbark\tVERB\t_\t_\t0\troot\t_\t_
4\tloudly\tloudly\tADV\t_\t_\t3\tadvmod\t_\t_

1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_
1\tdo\t_\t_\t_\t_\t0\t_\t_\t_
2\tn't\t_\t_\t_\t_\t1\t_\t_\t_
";

const PREDICTED: &str = "1\tthe\t_\t_\t_\t_\t2\t_\t_\t_
2\tdog\t_\t_\t_\t_\t3\t_\t_\t_
3\tbarked\t_\t_\t_\t_\t0\t_\t_\t_
4\tloudly\t_\t_\t_\t_\t2\t_\t_\t_

1\tdo\t_\t_\t_\t_\t2\t_\t_\t_
2\tn't\t_\t_\t_\t_\t0\t_\t_\t_
";

fn main() -> depformer::Result<()> {
    let gold = parse_conllu(GOLD)?;
    let pred = parse_conllu(PREDICTED)?;
    let (mut correct, mut total) = (0, 0);
    for (p, g) in pred.iter().zip(&gold) {
        let (c, t) = attachment_counts(p.heads(), g.heads())?;
        println!("{:<28} {c}/{t}", g.tokens().join(" "));
        correct += c;
        total += t;
    }
    println!("micro-averaged UAS {:.3}", correct as f64 / total as f64);
    print!("\n{}", emit_conllu(&gold));
    Ok(())
}
