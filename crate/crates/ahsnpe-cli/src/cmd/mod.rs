pub mod diagnose;
pub mod fit_ahsnpe;
pub mod fit_exchange;
pub mod fit_hier_bayes;
pub mod report;
pub mod simulate;
