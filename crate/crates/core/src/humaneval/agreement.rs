use serde::{Deserialize, Serialize};

use crate::eval::Judgement;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n_items: usize,
    pub n_agree: usize,
    pub percent_agreement: f64,
    /// Cohen's kappa; `None` when chance agreement is 1 and kappa is undefined.
    pub kappa: Option<f64>,
}

/// Agreement between two annotators over paired judgements.
pub fn agreement(pairs: &[(Judgement, Judgement)]) -> AgreementStats {
    let n = pairs.len();
    let n_agree = pairs.iter().filter(|(a, b)| a == b).count();
    if n == 0 {
        return AgreementStats {
            n_items: 0,
            n_agree: 0,
            percent_agreement: 0.0,
            kappa: None,
        };
    }
    let nf = n as f64;
    let a_yes = pairs.iter().filter(|p| p.0 == Judgement::Correct).count() as f64 / nf;
    let b_yes = pairs.iter().filter(|p| p.1 == Judgement::Correct).count() as f64 / nf;
    let po = n_agree as f64 / nf;
    let pe = a_yes * b_yes + (1.0 - a_yes) * (1.0 - b_yes);
    AgreementStats {
        n_items: n,
        n_agree,
        percent_agreement: 100.0 * po,
        kappa: (pe < 1.0).then(|| (po - pe) / (1.0 - pe)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Judgement::{Correct as C, Incorrect as I};

    #[test]
    fn ten_items_nine_agreed() {
        // 2×2 table: CC 6, II 3, CI 1, IC 0
        let mut pairs = vec![(C, C); 6];
        pairs.extend([(I, I); 3]);
        pairs.push((C, I));
        let s = agreement(&pairs);
        assert_eq!((s.n_items, s.n_agree), (10, 9));
        assert_eq!(s.percent_agreement, 90.0);
        // p_o = 0.9, p_e = 0.7·0.6 + 0.3·0.4 = 0.54, κ = 0.36 / 0.46
        assert!((s.kappa.unwrap() - 0.36 / 0.46).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(agreement(&[(C, C), (C, C)]).kappa, None);
        assert_eq!(agreement(&[(C, I), (I, C)]).kappa, Some(-1.0));
        assert_eq!(agreement(&[(C, C), (I, I)]).kappa, Some(1.0));
    }
}
