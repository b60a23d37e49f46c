//! A worked example: a sports attendance table and the layout an attack
//! found for it.

use crate::table::{ColPerm, RowPerm, Table, TqaExample, DEFAULT_ORDER_KEYWORDS};

pub const SPORTS_TABLE: &str = "\
Competition|Total spectatorship|Average match attendance|Year|
A-League|1,772,133|12,707|2012/2013|
Australian Football League|6,931,085|33,484|2013|
Big Bash League|550,262|17,750|2011/2012|
National Basketball League|547,021|4,031|2010/2011|
National Rugby League|3,345,248|16,643|2013|
Super Rugby|773,940|19,348|2012|
Rugby Championship|133,532|44,511|2012|
State of Origin series|186,607|62,202|2011|
Women's National Basketball League|77,944||2010/2011|";

pub const SPORTS_TABLE_PERMUTED: &str = "\
Competition|Total spectatorship|Year|Average match attendance|
National Rugby League|3,345,248|2013|16,643|
Women's National Basketball League|77,944|2010/2011||
Australian Football League|6,931,085|2013|33,484|
National Basketball League|547,021|2010/2011|4,031|
Big Bash League|550,262|2011/2012|17,750|
State of Origin series|186,607|2011|62,202|
Super Rugby|773,940|2012|19,348|
A-League|1,772,133|2012/2013|12,707|
Rugby Championship|133,532|2012|44,511|";

pub const SPORTS_QUESTION: &str = "Which had the largest average match attendance?";
pub const SPORTS_ANSWER: &str = "State of Origin series";
/// Responses before and after the attack, reduced to their final answers.
pub const SPORTS_CLEAN_RESPONSE: &str =
    "The highest attendance is 62,202, which is for the State of origin series in 2011.";
pub const SPORTS_ATTACKED_RESPONSE: &str = "The maximum value in average Match attendance is 62";

pub fn sports_table() -> Table {
    Table::parse_linearized("wtq-sports", SPORTS_TABLE).expect("fixture parses")
}

pub fn sports_example() -> TqaExample {
    TqaExample::new(
        sports_table(),
        SPORTS_QUESTION,
        SPORTS_ANSWER,
        DEFAULT_ORDER_KEYWORDS,
    )
    .expect("fixture is valid")
}

/// The attacked layout: source data rows in display order, and the column
/// order with the last two columns swapped.
pub fn sports_attack_layout() -> (RowPerm, ColPerm) {
    (
        RowPerm::new(vec![4, 8, 1, 3, 2, 7, 5, 0, 6]).expect("valid"),
        ColPerm::new(vec![0, 1, 3, 2]).expect("valid"),
    )
}
