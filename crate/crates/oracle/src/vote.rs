/// Majority of three task ids; `p1` when all differ.
pub fn brute_force_vote(p1: usize, p2: usize, p3: usize) -> usize {
    let votes = [p1, p2, p3];
    for candidate in votes {
        let mut count = 0;
        for v in votes {
            if v == candidate {
                count += 1;
            }
        }
        if count >= 2 {
            return candidate;
        }
    }
    p1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(brute_force_vote(1, 1, 2), 1);
        assert_eq!(brute_force_vote(3, 1, 2), 3);
        assert_eq!(brute_force_vote(2, 5, 5), 5);
        assert_eq!(brute_force_vote(4, 4, 4), 4);
        assert_eq!(brute_force_vote(1, 2, 1), 1);
    }
}
